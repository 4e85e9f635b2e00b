//! Multi-cloud proxy: fans shares out to registered backends, keeps the
//! share index, and reassembles files from the first `t` reachable shares.

mod backend;

use std::collections::{BTreeMap, HashSet};
use std::sync::mpsc;
use std::sync::Arc;
use std::time::Duration;

use chrono::{DateTime, Utc};
use parking_lot::RwLock;
use rusqlite::{params, OptionalExtension};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::db::{now_text, parse_time, Database};
use crate::ids::{BlobId, CloudId};
use crate::sharing::{self, Share, SharingError};

pub use backend::{
    BackendError, BackendKind, CloudBackend, CloudBackendDescriptor, LatencyMockBackend, LocalDirBackend,
    MemoryBackend,
};

#[derive(Debug, Error)]
pub enum StorageError {
    #[error("cloud {0} is already registered")]
    DuplicateCloud(CloudId),
    #[error("unknown cloud {0}")]
    UnknownCloud(CloudId),
    #[error("invalid backend descriptor: {0}")]
    InvalidDescriptor(String),
    #[error("{shares} shares for {clouds} clouds")]
    ShareCountMismatch { shares: usize, clouds: usize },
    #[error("cloud {0} listed more than once")]
    RepeatedCloud(CloudId),
    #[error("share labels do not match file {0}")]
    LabelMismatch(BlobId),
    #[error("file {0} is already stored")]
    AlreadyStored(BlobId),
    #[error("file {0} not found")]
    NotFound(BlobId),
    #[error("only {live} of the {needed} required shares are reachable")]
    InsufficientLiveShares { live: usize, needed: usize },
    #[error("backend {cloud} failed: {source}")]
    Backend {
        cloud: CloudId,
        #[source]
        source: BackendError,
    },
    #[error(transparent)]
    Sharing(#[from] SharingError),
    #[error(transparent)]
    Db(#[from] rusqlite::Error),
}

/// Row of the share index: where one share of one stored file lives.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct IndexEntry {
    pub file_id: BlobId,
    pub share_id: u8,
    pub cloud_id: CloudId,
    pub object_key: String,
    pub stored_at: DateTime<Utc>,
}

/// Backend object left behind after a failed delete.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Orphan {
    pub cloud_id: CloudId,
    pub object_key: String,
    pub recorded_at: DateTime<Utc>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BackendHealth {
    pub cloud_id: CloudId,
    pub display_name: String,
    pub healthy: bool,
}

struct Registered {
    display_name: String,
    backend: Arc<dyn CloudBackend>,
}

pub fn object_key(file_id: BlobId, share_id: u8) -> String {
    format!("{file_id}/{share_id}")
}

pub struct MultiCloudProxy {
    db: Database,
    backends: RwLock<BTreeMap<CloudId, Registered>>,
}

impl std::fmt::Debug for MultiCloudProxy {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("MultiCloudProxy")
            .field("clouds", &self.cloud_ids())
            .finish()
    }
}

impl MultiCloudProxy {
    pub fn new(db: Database) -> Self {
        Self {
            db,
            backends: RwLock::new(BTreeMap::new()),
        }
    }

    pub fn register_backend(&self, desc: &CloudBackendDescriptor) -> Result<CloudId, StorageError> {
        let backend: Arc<dyn CloudBackend> = match &desc.kind {
            BackendKind::InMemory => Arc::new(MemoryBackend::new()),
            BackendKind::LocalDirectory { root } => Arc::new(
                LocalDirBackend::new(root).map_err(|e| StorageError::InvalidDescriptor(e.to_string()))?,
            ),
            BackendKind::LatencyMock {
                delay_ms,
                failure_rate,
            } => {
                if !(0.0..=1.0).contains(failure_rate) {
                    return Err(StorageError::InvalidDescriptor(format!(
                        "failure rate {failure_rate} outside [0, 1]"
                    )));
                }
                Arc::new(LatencyMockBackend::new(Duration::from_millis(*delay_ms), *failure_rate))
            }
        };
        self.register_instance(desc.cloud_id.clone(), &desc.display_name, backend)
    }

    /// Registers an already constructed backend, e.g. one the caller keeps a
    /// handle to for fault injection.
    pub fn register_instance(
        &self,
        cloud_id: CloudId,
        display_name: &str,
        backend: Arc<dyn CloudBackend>,
    ) -> Result<CloudId, StorageError> {
        if cloud_id.as_str().is_empty() {
            return Err(StorageError::InvalidDescriptor("empty cloud id".into()));
        }
        let mut backends = self.backends.write();
        if backends.contains_key(&cloud_id) {
            return Err(StorageError::DuplicateCloud(cloud_id));
        }
        backends.insert(
            cloud_id.clone(),
            Registered {
                display_name: display_name.to_string(),
                backend,
            },
        );
        Ok(cloud_id)
    }

    pub fn cloud_ids(&self) -> Vec<CloudId> {
        self.backends.read().keys().cloned().collect()
    }

    pub fn backend(&self, cloud_id: &CloudId) -> Option<Arc<dyn CloudBackend>> {
        self.backends.read().get(cloud_id).map(|r| r.backend.clone())
    }

    pub fn health(&self) -> Vec<BackendHealth> {
        self.backends
            .read()
            .iter()
            .map(|(id, r)| BackendHealth {
                cloud_id: id.clone(),
                display_name: r.display_name.clone(),
                healthy: r.backend.health().is_ok(),
            })
            .collect()
    }

    /// Stores share `i` at cloud `i` and indexes all of them in one
    /// transaction. If any write fails, already written shares are removed
    /// and no index rows are created.
    pub fn upload_shares(
        &self,
        file_id: BlobId,
        shares: &[Share],
        cloud_ids: &[CloudId],
    ) -> Result<Vec<IndexEntry>, StorageError> {
        if shares.is_empty() || shares.len() != cloud_ids.len() {
            return Err(StorageError::ShareCountMismatch {
                shares: shares.len(),
                clouds: cloud_ids.len(),
            });
        }
        let mut seen = HashSet::new();
        for id in cloud_ids {
            if !seen.insert(id) {
                return Err(StorageError::RepeatedCloud(id.clone()));
            }
        }
        if shares.iter().any(|s| s.file_id != file_id) {
            return Err(StorageError::LabelMismatch(file_id));
        }
        let targets = cloud_ids
            .iter()
            .map(|id| {
                self.backend(id)
                    .map(|b| (id.clone(), b))
                    .ok_or_else(|| StorageError::UnknownCloud(id.clone()))
            })
            .collect::<Result<Vec<_>, _>>()?;
        if !self.index_entries(file_id)?.is_empty() {
            return Err(StorageError::AlreadyStored(file_id));
        }

        let results: Vec<Result<(), BackendError>> = std::thread::scope(|scope| {
            let handles: Vec<_> = shares
                .iter()
                .zip(&targets)
                .map(|(share, (_, backend))| {
                    let key = object_key(file_id, share.share_id);
                    let bytes = share.to_bytes();
                    scope.spawn(move || backend.put(&key, &bytes))
                })
                .collect();
            handles
                .into_iter()
                .map(|h| h.join().expect("upload worker panicked"))
                .collect()
        });

        if let Some(pos) = results.iter().position(Result::is_err) {
            for ((share, (cloud, backend)), result) in shares.iter().zip(&targets).zip(&results) {
                if result.is_ok() {
                    let key = object_key(file_id, share.share_id);
                    if backend.delete(&key).is_err() {
                        self.record_orphan(cloud, &key)?;
                    }
                }
            }
            let source = results.into_iter().nth(pos).and_then(Result::err).expect("failed result");
            return Err(StorageError::Backend {
                cloud: targets[pos].0.clone(),
                source,
            });
        }

        let stored_at = now_text();
        let entries: Vec<IndexEntry> = shares
            .iter()
            .zip(&targets)
            .map(|(share, (cloud, _))| IndexEntry {
                file_id,
                share_id: share.share_id,
                cloud_id: cloud.clone(),
                object_key: object_key(file_id, share.share_id),
                stored_at: parse_time(&stored_at),
            })
            .collect();
        self.db.transaction(|tx| {
            let mut stmt = tx.prepare(
                "INSERT INTO share_index (blob_id, share_id, cloud_id, object_key, stored_at)
                 VALUES (?1, ?2, ?3, ?4, ?5)",
            )?;
            for e in &entries {
                stmt.execute(params![
                    e.file_id.to_string(),
                    e.share_id,
                    e.cloud_id.as_str(),
                    e.object_key,
                    stored_at
                ])?;
            }
            Ok::<_, StorageError>(())
        })?;
        Ok(entries)
    }

    pub fn index_entries(&self, file_id: BlobId) -> Result<Vec<IndexEntry>, StorageError> {
        Ok(self.db.with(|conn| {
            let mut stmt = conn.prepare(
                "SELECT share_id, cloud_id, object_key, stored_at FROM share_index
                 WHERE blob_id = ?1 ORDER BY share_id",
            )?;
            let rows = stmt.query_map([file_id.to_string()], |row| {
                Ok(IndexEntry {
                    file_id,
                    share_id: row.get(0)?,
                    cloud_id: CloudId(row.get(1)?),
                    object_key: row.get(2)?,
                    stored_at: parse_time(&row.get::<_, String>(3)?),
                })
            })?;
            rows.collect()
        })?)
    }

    /// Every file id that has index rows.
    pub fn stored_files(&self) -> Result<Vec<BlobId>, StorageError> {
        let ids: Vec<String> = self.db.with(|conn| {
            let mut stmt = conn.prepare("SELECT DISTINCT blob_id FROM share_index ORDER BY blob_id")?;
            let rows = stmt.query_map([], |row| row.get(0))?;
            rows.collect()
        })?;
        Ok(ids.iter().filter_map(|s| s.parse().ok()).collect())
    }

    /// Fetches shares in parallel, keeps the first `t` valid ones and
    /// combines them. Slower fetches still in flight are abandoned.
    pub fn retrieve_file(&self, file_id: BlobId, t: usize) -> Result<Vec<u8>, StorageError> {
        let entries = self.index_entries(file_id)?;
        if entries.is_empty() {
            return Err(StorageError::NotFound(file_id));
        }
        let (tx, rx) = mpsc::channel::<Option<Share>>();
        let mut launched = 0;
        for entry in &entries {
            let Some(backend) = self.backend(&entry.cloud_id) else {
                continue;
            };
            let tx = tx.clone();
            let entry = entry.clone();
            launched += 1;
            std::thread::spawn(move || {
                let share = backend
                    .get(&entry.object_key)
                    .ok()
                    .and_then(|bytes| Share::from_bytes(&bytes).ok())
                    .filter(|s| s.file_id == entry.file_id && s.share_id == entry.share_id);
                let _ = tx.send(share);
            });
        }
        drop(tx);

        let mut shares = Vec::with_capacity(t);
        for _ in 0..launched {
            match rx.recv() {
                Ok(Some(share)) => {
                    shares.push(share);
                    if shares.len() == t {
                        break;
                    }
                }
                Ok(None) => {}
                Err(_) => break,
            }
        }
        if shares.len() < t {
            return Err(StorageError::InsufficientLiveShares {
                live: shares.len(),
                needed: t,
            });
        }
        Ok(sharing::combine(&shares, t)?)
    }

    /// Removes every share and index row of `file_id`. Objects on
    /// unreachable backends are recorded as orphans. Returns the number of
    /// backend objects actually deleted.
    pub fn delete_file(&self, file_id: BlobId) -> Result<usize, StorageError> {
        let entries = self.index_entries(file_id)?;
        if entries.is_empty() {
            return Err(StorageError::NotFound(file_id));
        }
        let mut removed = 0;
        for entry in &entries {
            let deleted = self
                .backend(&entry.cloud_id)
                .map(|b| b.delete(&entry.object_key))
                .is_some_and(|r| r.is_ok());
            if deleted {
                removed += 1;
            } else {
                self.record_orphan(&entry.cloud_id, &entry.object_key)?;
            }
        }
        self.db.with(|conn| {
            conn.execute("DELETE FROM share_index WHERE blob_id = ?1", [file_id.to_string()])
        })?;
        Ok(removed)
    }

    fn record_orphan(&self, cloud: &CloudId, key: &str) -> Result<(), StorageError> {
        self.db.with(|conn| {
            conn.execute(
                "INSERT OR REPLACE INTO orphans (cloud_id, object_key, recorded_at) VALUES (?1, ?2, ?3)",
                params![cloud.as_str(), key, now_text()],
            )
        })?;
        Ok(())
    }

    pub fn orphans(&self) -> Result<Vec<Orphan>, StorageError> {
        Ok(self.db.with(|conn| {
            let mut stmt =
                conn.prepare("SELECT cloud_id, object_key, recorded_at FROM orphans ORDER BY recorded_at")?;
            let rows = stmt.query_map([], |row| {
                Ok(Orphan {
                    cloud_id: CloudId(row.get(0)?),
                    object_key: row.get(1)?,
                    recorded_at: parse_time(&row.get::<_, String>(2)?),
                })
            })?;
            rows.collect()
        })?)
    }

    /// Retries deleting orphaned objects; returns how many were cleared.
    pub fn cleanup_orphans(&self) -> Result<usize, StorageError> {
        let mut cleared = 0;
        for orphan in self.orphans()? {
            let gone = matches!(
                self.backend(&orphan.cloud_id).map(|b| b.delete(&orphan.object_key)),
                Some(Ok(())) | Some(Err(BackendError::NotFound(_)))
            );
            if gone {
                self.db.with(|conn| {
                    conn.execute(
                        "DELETE FROM orphans WHERE cloud_id = ?1 AND object_key = ?2",
                        params![orphan.cloud_id.as_str(), orphan.object_key],
                    )
                })?;
                cleared += 1;
            }
        }
        Ok(cleared)
    }

    pub fn is_orphan(&self, cloud: &CloudId, key: &str) -> Result<bool, StorageError> {
        Ok(self
            .db
            .with(|conn| {
                conn.query_row(
                    "SELECT 1 FROM orphans WHERE cloud_id = ?1 AND object_key = ?2",
                    params![cloud.as_str(), key],
                    |_| Ok(()),
                )
                .optional()
            })?
            .is_some())
    }
}
