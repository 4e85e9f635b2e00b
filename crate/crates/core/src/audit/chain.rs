use std::collections::BTreeMap;
use std::fmt;
use std::sync::Arc;

use parking_lot::Mutex;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::store::{LogStore, MemoryLogStore};
use super::AuditError;
use crate::ids::BrokerId;

/// `prev_hash` of the first entry.
pub const GENESIS_HASH: &str = "0000000000000000000000000000000000000000000000000000000000000000";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum Module {
    Dmm,
    Aacm,
    Kmm,
    Mcp,
}

impl Module {
    pub fn as_str(self) -> &'static str {
        match self {
            Module::Dmm => "DMM",
            Module::Aacm => "AACM",
            Module::Kmm => "KMM",
            Module::Mcp => "MCP",
        }
    }
}

impl fmt::Display for Module {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BrokerLogEntry {
    pub seq: u64,
    pub ts_ms: i64,
    pub broker_id: BrokerId,
    pub module: Module,
    pub action: String,
    pub params: BTreeMap<String, String>,
    pub prev_hash: String,
    pub entry_hash: String,
}

#[derive(Serialize)]
struct HashedBody<'a> {
    seq: u64,
    ts_ms: i64,
    broker_id: BrokerId,
    module: Module,
    action: &'a str,
    params: &'a BTreeMap<String, String>,
}

impl BrokerLogEntry {
    /// Builds an entry and computes its hash from the canonical body and
    /// `prev_hash`.
    pub fn seal(
        seq: u64,
        ts_ms: i64,
        broker_id: BrokerId,
        module: Module,
        action: &str,
        params: BTreeMap<String, String>,
        prev_hash: &str,
    ) -> Self {
        let mut entry = Self {
            seq,
            ts_ms,
            broker_id,
            module,
            action: action.to_string(),
            params,
            prev_hash: prev_hash.to_string(),
            entry_hash: String::new(),
        };
        entry.entry_hash = entry.compute_hash();
        entry
    }

    pub fn compute_hash(&self) -> String {
        let body = HashedBody {
            seq: self.seq,
            ts_ms: self.ts_ms,
            broker_id: self.broker_id,
            module: self.module,
            action: &self.action,
            params: &self.params,
        };
        let mut hasher = Sha256::new();
        hasher.update(serde_json::to_vec(&body).expect("body serializes"));
        hasher.update(self.prev_hash.as_bytes());
        hex::encode(hasher.finalize())
    }

    /// `MODULE.action`, the key rules are written against.
    pub fn event_kind(&self) -> String {
        format!("{}.{}", self.module, self.action)
    }

    pub fn param(&self, key: &str) -> Option<&str> {
        self.params.get(key).map(String::as_str)
    }

    pub fn to_line(&self) -> Vec<u8> {
        serde_json::to_vec(self).expect("entry serializes")
    }

    /// Parses a stored line, accepting only the exact canonical encoding.
    pub fn from_line(line: &[u8]) -> Option<Self> {
        let entry: Self = serde_json::from_slice(line).ok()?;
        (entry.to_line() == line).then_some(entry)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "kebab-case")]
pub enum ChainStatus {
    Intact { checked: u64 },
    Broken { at: u64, reason: BreakReason },
}

impl ChainStatus {
    pub fn is_intact(&self) -> bool {
        matches!(self, ChainStatus::Intact { .. })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BreakReason {
    /// Not the canonical encoding of an entry.
    Malformed,
    SequenceGap,
    HashMismatch,
    LinkMismatch,
    /// Fewer entries than the head pointer records.
    Truncated,
    HeadMismatch,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ChainHead {
    pub seq: u64,
    pub hash: String,
}

impl ChainHead {
    fn encode(&self) -> Vec<u8> {
        format!("{} {}", self.seq, self.hash).into_bytes()
    }

    fn decode(bytes: &[u8]) -> Option<Self> {
        let text = std::str::from_utf8(bytes).ok()?;
        let (seq, hash) = text.trim().split_once(' ')?;
        Some(Self {
            seq: seq.parse().ok()?,
            hash: hash.to_string(),
        })
    }
}

/// Checks entries `from..=to` (1-based sequence numbers) of `lines`.
/// `head` is consulted when the range reaches the recorded head.
pub fn verify_lines(lines: &[Vec<u8>], head: Option<&ChainHead>, from: u64, to: u64) -> ChainStatus {
    if from > to {
        return ChainStatus::Intact { checked: 0 };
    }
    let mut prev_hash = if from == 1 {
        Some(GENESIS_HASH.to_string())
    } else {
        lines
            .get(from as usize - 2)
            .and_then(|l| BrokerLogEntry::from_line(l))
            .map(|e| e.entry_hash)
    };
    let available = lines.len() as u64;
    for seq in from..=to.min(available) {
        let Some(entry) = BrokerLogEntry::from_line(&lines[seq as usize - 1]) else {
            return ChainStatus::Broken {
                at: seq,
                reason: BreakReason::Malformed,
            };
        };
        if entry.seq != seq {
            return ChainStatus::Broken {
                at: seq,
                reason: BreakReason::SequenceGap,
            };
        }
        if entry.compute_hash() != entry.entry_hash {
            return ChainStatus::Broken {
                at: seq,
                reason: BreakReason::HashMismatch,
            };
        }
        if prev_hash.as_deref() != Some(entry.prev_hash.as_str()) {
            return ChainStatus::Broken {
                at: seq,
                reason: BreakReason::LinkMismatch,
            };
        }
        prev_hash = Some(entry.entry_hash);
    }
    if let Some(head) = head {
        if head.seq > available && to > available {
            return ChainStatus::Broken {
                at: available + 1,
                reason: BreakReason::Truncated,
            };
        }
        if head.seq >= from && head.seq <= to.min(available) {
            let stored = BrokerLogEntry::from_line(&lines[head.seq as usize - 1]).map(|e| e.entry_hash);
            if stored.as_deref() != Some(head.hash.as_str()) {
                return ChainStatus::Broken {
                    at: head.seq,
                    reason: BreakReason::HeadMismatch,
                };
            }
        }
    }
    ChainStatus::Intact {
        checked: to.min(available) + 1 - from,
    }
}

struct Tail {
    seq: u64,
    hash: String,
}

/// The Brokers' Log: a single-writer hash chain shared by all broker
/// partitions.
pub struct BrokerLog {
    store: Arc<dyn LogStore>,
    tail: Mutex<Tail>,
}

impl fmt::Debug for BrokerLog {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("BrokerLog").field("seq", &self.tail.lock().seq).finish()
    }
}

impl BrokerLog {
    /// Opens a log, resuming after the last stored entry.
    pub fn open(store: Arc<dyn LogStore>) -> Result<Self, AuditError> {
        let lines = store.read_all()?;
        let tail = match lines.last() {
            None => Tail {
                seq: 0,
                hash: GENESIS_HASH.to_string(),
            },
            Some(line) => {
                let entry = BrokerLogEntry::from_line(line)
                    .ok_or_else(|| AuditError::Corrupt(format!("last entry {} unreadable", lines.len())))?;
                Tail {
                    seq: entry.seq,
                    hash: entry.entry_hash,
                }
            }
        };
        Ok(Self {
            store,
            tail: Mutex::new(tail),
        })
    }

    pub fn in_memory() -> Self {
        Self::open(Arc::new(MemoryLogStore::new())).expect("empty store")
    }

    pub fn store(&self) -> &Arc<dyn LogStore> {
        &self.store
    }

    /// Appends an action and advances the head pointer. On failure the
    /// chain is unchanged and the caller must abort the action.
    pub fn append(
        &self,
        broker_id: BrokerId,
        module: Module,
        action: &str,
        params: BTreeMap<String, String>,
    ) -> Result<BrokerLogEntry, AuditError> {
        let mut tail = self.tail.lock();
        let entry = BrokerLogEntry::seal(
            tail.seq + 1,
            chrono::Utc::now().timestamp_millis(),
            broker_id,
            module,
            action,
            params,
            &tail.hash,
        );
        self.store.append(&entry.to_line())?;
        // The record is committed from here on, even if the head update
        // below fails; a lagging head only weakens truncation detection.
        tail.seq = entry.seq;
        tail.hash = entry.entry_hash.clone();
        let head = ChainHead {
            seq: entry.seq,
            hash: entry.entry_hash.clone(),
        };
        self.store.set_head(&head.encode())?;
        Ok(entry)
    }

    pub fn head(&self) -> Result<Option<ChainHead>, AuditError> {
        Ok(self.store.head()?.as_deref().and_then(ChainHead::decode))
    }

    pub fn last_seq(&self) -> u64 {
        self.tail.lock().seq
    }

    pub fn lines(&self) -> Result<Vec<Vec<u8>>, AuditError> {
        self.store.read_all()
    }

    pub fn entries(&self) -> Result<Vec<Option<BrokerLogEntry>>, AuditError> {
        Ok(self.lines()?.iter().map(|l| BrokerLogEntry::from_line(l)).collect())
    }

    /// Recomputes every link in `from..=to` and reports the first break.
    pub fn verify_chain(&self, from: u64, to: u64) -> Result<ChainStatus, AuditError> {
        let lines = self.lines()?;
        let head = self.head()?;
        let limit = (lines.len() as u64).max(head.as_ref().map_or(0, |h| h.seq));
        if from > to {
            return Ok(ChainStatus::Intact { checked: 0 });
        }
        if from == 0 || to > limit {
            return Err(AuditError::InvalidRange { from, to, len: limit });
        }
        Ok(verify_lines(&lines, head.as_ref(), from, to))
    }

    /// Verifies the whole log against its head pointer.
    pub fn verify_all(&self) -> Result<ChainStatus, AuditError> {
        let lines = self.lines()?;
        let head = self.head()?;
        let to = (lines.len() as u64).max(head.as_ref().map_or(0, |h| h.seq));
        Ok(verify_lines(&lines, head.as_ref(), 1, to))
    }
}
