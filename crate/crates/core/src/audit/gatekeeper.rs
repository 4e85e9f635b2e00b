use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::sync::Arc;

use parking_lot::Mutex;
use serde::{Deserialize, Serialize};

use super::store::{LogStore, MemoryLogStore};
use super::AuditError;
use crate::ids::{BrokerId, UserId};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RequestKind {
    Register,
    Login,
    SubmitUpload,
    ListReviews,
    Approve,
    Retrieve,
    Revoke,
    PolicyUpdate,
    AccessRequest,
    Emergency,
    ListAlerts,
    ChainStatus,
    Maintenance,
}

impl RequestKind {
    pub fn as_str(self) -> &'static str {
        match self {
            RequestKind::Register => "register",
            RequestKind::Login => "login",
            RequestKind::SubmitUpload => "submit_upload",
            RequestKind::ListReviews => "list_reviews",
            RequestKind::Approve => "approve",
            RequestKind::Retrieve => "retrieve",
            RequestKind::Revoke => "revoke",
            RequestKind::PolicyUpdate => "policy_update",
            RequestKind::AccessRequest => "access_request",
            RequestKind::Emergency => "emergency",
            RequestKind::ListAlerts => "list_alerts",
            RequestKind::ChainStatus => "chain_status",
            RequestKind::Maintenance => "maintenance",
        }
    }
}

impl fmt::Display for RequestKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// One user request as seen at the front door, written before the broker
/// acts on it.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GatekeeperEntry {
    pub seq: u64,
    pub ts_ms: i64,
    pub broker_id: BrokerId,
    pub user: UserId,
    pub kind: RequestKind,
    pub params: BTreeMap<String, String>,
}

impl GatekeeperEntry {
    pub fn param(&self, key: &str) -> Option<&str> {
        self.params.get(key).map(String::as_str)
    }
}

/// A record read back from a Gatekeeper namespace, parsed or not.
#[derive(Debug, Clone)]
pub enum GatekeeperRecord {
    Entry(GatekeeperEntry),
    Malformed { broker_id: BrokerId, index: usize },
}

/// Request log with one namespace per broker and a process-wide sequence.
pub struct Gatekeeper {
    stores: BTreeMap<BrokerId, Arc<dyn LogStore>>,
    next_seq: Mutex<u64>,
}

impl fmt::Debug for Gatekeeper {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Gatekeeper")
            .field("namespaces", &self.stores.keys().collect::<Vec<_>>())
            .field("next_seq", &*self.next_seq.lock())
            .finish()
    }
}

impl Gatekeeper {
    pub fn new(stores: BTreeMap<BrokerId, Arc<dyn LogStore>>) -> Result<Self, AuditError> {
        if stores.is_empty() {
            return Err(AuditError::InvalidConfig("gatekeeper needs at least one namespace".into()));
        }
        let gk = Self {
            stores,
            next_seq: Mutex::new(1),
        };
        let last = gk
            .entries()?
            .iter()
            .filter_map(|r| match r {
                GatekeeperRecord::Entry(e) => Some(e.seq),
                GatekeeperRecord::Malformed { .. } => None,
            })
            .max()
            .unwrap_or(0);
        *gk.next_seq.lock() = last + 1;
        Ok(gk)
    }

    pub fn in_memory(brokers: u32) -> Self {
        let stores = (0..brokers.max(1))
            .map(|b| (BrokerId(b), Arc::new(MemoryLogStore::new()) as Arc<dyn LogStore>))
            .collect();
        Self::new(stores).expect("fresh in-memory stores")
    }

    pub fn namespaces(&self) -> Vec<BrokerId> {
        self.stores.keys().copied().collect()
    }

    pub fn store(&self, broker: BrokerId) -> Option<&Arc<dyn LogStore>> {
        self.stores.get(&broker)
    }

    /// Durably appends a request record and returns its sequence number.
    /// A write failure is returned to the caller, which must then refuse
    /// the request.
    pub fn record(
        &self,
        broker_id: BrokerId,
        user: &UserId,
        kind: RequestKind,
        params: BTreeMap<String, String>,
    ) -> Result<u64, AuditError> {
        let store = self
            .stores
            .get(&broker_id)
            .ok_or_else(|| AuditError::InvalidConfig(format!("no gatekeeper namespace for {broker_id}")))?;
        let mut next = self.next_seq.lock();
        let entry = GatekeeperEntry {
            seq: *next,
            ts_ms: chrono::Utc::now().timestamp_millis(),
            broker_id,
            user: user.clone(),
            kind,
            params,
        };
        let line = serde_json::to_vec(&entry).expect("gatekeeper entry serializes");
        store.append(&line)?;
        *next += 1;
        Ok(entry.seq)
    }

    /// Merged view across namespaces ordered by sequence number. Records
    /// that fail to parse are kept so the inspector can report them.
    pub fn entries(&self) -> Result<Vec<GatekeeperRecord>, AuditError> {
        let mut parsed = Vec::new();
        let mut malformed = Vec::new();
        for (broker, store) in &self.stores {
            for (index, line) in store.read_all()?.into_iter().enumerate() {
                match serde_json::from_slice::<GatekeeperEntry>(&line) {
                    Ok(e) if e.broker_id == *broker => parsed.push(e),
                    _ => malformed.push(GatekeeperRecord::Malformed {
                        broker_id: *broker,
                        index,
                    }),
                }
            }
        }
        parsed.sort_by_key(|e| e.seq);
        let mut out: Vec<_> = parsed.into_iter().map(GatekeeperRecord::Entry).collect();
        out.extend(malformed);
        Ok(out)
    }

    /// Parsed entries keyed by sequence number.
    pub fn index(&self) -> Result<HashMap<u64, GatekeeperEntry>, AuditError> {
        Ok(self
            .entries()?
            .into_iter()
            .filter_map(|r| match r {
                GatekeeperRecord::Entry(e) => Some((e.seq, e)),
                GatekeeperRecord::Malformed { .. } => None,
            })
            .collect())
    }
}
