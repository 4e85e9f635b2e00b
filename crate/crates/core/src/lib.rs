//! Health Access Broker.
pub mod abe;
pub mod access;
pub mod api;
pub mod audit;
pub mod bench;
mod b64;
pub mod broker;
pub mod client;
pub mod db;
pub mod ids;
pub mod sharing;
pub mod storage;
mod wire;
pub use wire::WireError;
