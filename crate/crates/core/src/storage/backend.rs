use std::collections::BTreeMap;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::time::Duration;

use parking_lot::{Mutex, RwLock};
use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ids::CloudId;

#[derive(Debug, Error)]
pub enum BackendError {
    #[error("backend unavailable: {0}")]
    Unavailable(String),
    #[error("object {0} not found")]
    NotFound(String),
    #[error("invalid object key {0:?}")]
    InvalidKey(String),
    #[error(transparent)]
    Io(#[from] io::Error),
}

/// Minimal object-store contract. Anything implementing it can be
/// registered with the proxy.
pub trait CloudBackend: Send + Sync {
    fn put(&self, key: &str, bytes: &[u8]) -> Result<(), BackendError>;
    fn get(&self, key: &str) -> Result<Vec<u8>, BackendError>;
    fn delete(&self, key: &str) -> Result<(), BackendError>;
    fn health(&self) -> Result<(), BackendError>;
    /// All object keys currently held.
    fn keys(&self) -> Result<Vec<String>, BackendError>;
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "kebab-case")]
pub enum BackendKind {
    InMemory,
    LocalDirectory { root: PathBuf },
    LatencyMock { delay_ms: u64, failure_rate: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CloudBackendDescriptor {
    pub cloud_id: CloudId,
    #[serde(default)]
    pub display_name: String,
    pub kind: BackendKind,
}

impl CloudBackendDescriptor {
    pub fn in_memory(id: &str) -> Self {
        Self {
            cloud_id: CloudId::new(id),
            display_name: id.to_string(),
            kind: BackendKind::InMemory,
        }
    }

    pub fn latency_mock(id: &str, delay_ms: u64, failure_rate: f64) -> Self {
        Self {
            cloud_id: CloudId::new(id),
            display_name: id.to_string(),
            kind: BackendKind::LatencyMock {
                delay_ms,
                failure_rate,
            },
        }
    }

    pub fn local_directory(id: &str, root: impl Into<PathBuf>) -> Self {
        Self {
            cloud_id: CloudId::new(id),
            display_name: id.to_string(),
            kind: BackendKind::LocalDirectory { root: root.into() },
        }
    }
}

fn validate_key(key: &str) -> Result<(), BackendError> {
    let ok = !key.is_empty()
        && key.split('/').all(|seg| {
            !seg.is_empty() && seg.bytes().all(|b| b.is_ascii_alphanumeric() || b == b'-' || b == b'_')
        });
    if ok {
        Ok(())
    } else {
        Err(BackendError::InvalidKey(key.to_string()))
    }
}

/// Process-local object map. Can be switched offline to simulate an outage.
#[derive(Debug, Default)]
pub struct MemoryBackend {
    objects: RwLock<BTreeMap<String, Vec<u8>>>,
    offline: AtomicBool,
}

impl MemoryBackend {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn set_available(&self, available: bool) {
        self.offline.store(!available, Ordering::SeqCst);
    }

    fn check(&self) -> Result<(), BackendError> {
        if self.offline.load(Ordering::SeqCst) {
            Err(BackendError::Unavailable("in-memory backend switched offline".into()))
        } else {
            Ok(())
        }
    }

    /// Raw view of stored objects, bypassing availability.
    pub fn snapshot(&self) -> BTreeMap<String, Vec<u8>> {
        self.objects.read().clone()
    }
}

impl CloudBackend for MemoryBackend {
    fn put(&self, key: &str, bytes: &[u8]) -> Result<(), BackendError> {
        self.check()?;
        validate_key(key)?;
        self.objects.write().insert(key.to_string(), bytes.to_vec());
        Ok(())
    }

    fn get(&self, key: &str) -> Result<Vec<u8>, BackendError> {
        self.check()?;
        self.objects
            .read()
            .get(key)
            .cloned()
            .ok_or_else(|| BackendError::NotFound(key.to_string()))
    }

    fn delete(&self, key: &str) -> Result<(), BackendError> {
        self.check()?;
        self.objects
            .write()
            .remove(key)
            .map(|_| ())
            .ok_or_else(|| BackendError::NotFound(key.to_string()))
    }

    fn health(&self) -> Result<(), BackendError> {
        self.check()
    }

    fn keys(&self) -> Result<Vec<String>, BackendError> {
        self.check()?;
        Ok(self.objects.read().keys().cloned().collect())
    }
}

/// Objects stored as files under a root directory, one file per key.
#[derive(Debug)]
pub struct LocalDirBackend {
    root: PathBuf,
}

impl LocalDirBackend {
    pub fn new(root: impl Into<PathBuf>) -> Result<Self, BackendError> {
        let root = root.into();
        fs::create_dir_all(&root)?;
        Ok(Self { root })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    fn path_for(&self, key: &str) -> Result<PathBuf, BackendError> {
        validate_key(key)?;
        Ok(key.split('/').fold(self.root.clone(), |p, seg| p.join(seg)))
    }
}

impl CloudBackend for LocalDirBackend {
    fn put(&self, key: &str, bytes: &[u8]) -> Result<(), BackendError> {
        let path = self.path_for(key)?;
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent)?;
        }
        let tmp = path.with_extension("partial");
        fs::write(&tmp, bytes)?;
        fs::rename(&tmp, &path)?;
        Ok(())
    }

    fn get(&self, key: &str) -> Result<Vec<u8>, BackendError> {
        let path = self.path_for(key)?;
        fs::read(&path).map_err(|e| match e.kind() {
            io::ErrorKind::NotFound => BackendError::NotFound(key.to_string()),
            _ => e.into(),
        })
    }

    fn delete(&self, key: &str) -> Result<(), BackendError> {
        let path = self.path_for(key)?;
        fs::remove_file(&path).map_err(|e| match e.kind() {
            io::ErrorKind::NotFound => BackendError::NotFound(key.to_string()),
            _ => e.into(),
        })?;
        if let Some(parent) = path.parent() {
            if parent != self.root {
                // Only succeeds when the directory is empty.
                let _ = fs::remove_dir(parent);
            }
        }
        Ok(())
    }

    fn health(&self) -> Result<(), BackendError> {
        if self.root.is_dir() {
            Ok(())
        } else {
            Err(BackendError::Unavailable(format!("{} is not a directory", self.root.display())))
        }
    }

    fn keys(&self) -> Result<Vec<String>, BackendError> {
        let mut out = Vec::new();
        for dir in fs::read_dir(&self.root)? {
            let dir = dir?;
            if !dir.file_type()?.is_dir() {
                continue;
            }
            let prefix = dir.file_name().to_string_lossy().into_owned();
            for file in fs::read_dir(dir.path())? {
                let name = file?.file_name().to_string_lossy().into_owned();
                if !name.ends_with(".partial") {
                    out.push(format!("{prefix}/{name}"));
                }
            }
        }
        out.sort();
        Ok(out)
    }
}

/// In-memory store behind a fixed delay and a random failure rate.
#[derive(Debug)]
pub struct LatencyMockBackend {
    inner: MemoryBackend,
    delay: Duration,
    failure_rate_bits: AtomicU64,
    rng: Mutex<StdRng>,
}

impl LatencyMockBackend {
    pub fn new(delay: Duration, failure_rate: f64) -> Self {
        Self {
            inner: MemoryBackend::new(),
            delay,
            failure_rate_bits: AtomicU64::new(failure_rate.clamp(0.0, 1.0).to_bits()),
            rng: Mutex::new(StdRng::from_entropy()),
        }
    }

    pub fn failure_rate(&self) -> f64 {
        f64::from_bits(self.failure_rate_bits.load(Ordering::SeqCst))
    }

    pub fn set_failure_rate(&self, rate: f64) {
        self.failure_rate_bits
            .store(rate.clamp(0.0, 1.0).to_bits(), Ordering::SeqCst);
    }

    pub fn inner(&self) -> &MemoryBackend {
        &self.inner
    }

    fn simulate(&self) -> Result<(), BackendError> {
        if !self.delay.is_zero() {
            std::thread::sleep(self.delay);
        }
        let rate = self.failure_rate();
        if rate > 0.0 && self.rng.lock().gen_bool(rate) {
            return Err(BackendError::Unavailable("injected latency-mock failure".into()));
        }
        Ok(())
    }
}

impl CloudBackend for LatencyMockBackend {
    fn put(&self, key: &str, bytes: &[u8]) -> Result<(), BackendError> {
        self.simulate()?;
        self.inner.put(key, bytes)
    }

    fn get(&self, key: &str) -> Result<Vec<u8>, BackendError> {
        self.simulate()?;
        self.inner.get(key)
    }

    fn delete(&self, key: &str) -> Result<(), BackendError> {
        self.simulate()?;
        self.inner.delete(key)
    }

    fn health(&self) -> Result<(), BackendError> {
        self.simulate()?;
        self.inner.health()
    }

    fn keys(&self) -> Result<Vec<String>, BackendError> {
        self.inner.keys()
    }
}
