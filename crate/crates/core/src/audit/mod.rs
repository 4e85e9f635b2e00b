//! Audit trail and intrusion detection.
//!
//! The [`Gatekeeper`] records every user request before a broker acts on
//! it. The [`BrokerLog`] is a hash chain of the actions brokers perform.
//! The [`Inspector`] pairs each action with the request that justifies it
//! according to a declarative [`RuleSet`] and raises an [`Alert`] for
//! anything left unexplained.

mod alerts;
mod chain;
mod gatekeeper;
mod inspector;
mod rules;
mod store;

use thiserror::Error;

pub use alerts::{Alert, AlertKind, AlertStore, Finding, ADMIN_RECIPIENT};
pub use chain::{
    verify_lines, BreakReason, BrokerLog, BrokerLogEntry, ChainHead, ChainStatus, Module, GENESIS_HASH,
};
pub use gatekeeper::{Gatekeeper, GatekeeperEntry, GatekeeperRecord, RequestKind};
pub use inspector::{inspect, EngineState, Inspector, InspectorHandle};
pub use rules::{InspectionRule, RuleSet, Severity, BROKER_ACTIONS, DEFAULT_RULES_JSON};
pub use store::{FileLogStore, LogStore, MemoryLogStore};

#[derive(Debug, Error)]
pub enum AuditError {
    #[error("log storage unavailable: {0}")]
    Unavailable(String),
    #[error("log corrupt: {0}")]
    Corrupt(String),
    #[error("invalid range {from}..={to} for a log of {len} entries")]
    InvalidRange { from: u64, to: u64, len: u64 },
    #[error("invalid rule set: {0}")]
    InvalidRules(String),
    #[error("invalid audit configuration: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Db(#[from] rusqlite::Error),
}
