use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, Ordering};

use parking_lot::Mutex;

use super::AuditError;

/// Append-only record storage with a separately stored head pointer.
/// Records are opaque byte lines without the trailing newline.
pub trait LogStore: Send + Sync {
    fn append(&self, record: &[u8]) -> Result<(), AuditError>;
    fn read_all(&self) -> Result<Vec<Vec<u8>>, AuditError>;
    fn len(&self) -> Result<usize, AuditError>;
    fn set_head(&self, head: &[u8]) -> Result<(), AuditError>;
    fn head(&self) -> Result<Option<Vec<u8>>, AuditError>;

    fn is_empty(&self) -> Result<bool, AuditError> {
        Ok(self.len()? == 0)
    }
}

/// In-process store. Exposes raw access so tests can tamper with
/// committed records and inject write failures.
#[derive(Debug, Default)]
pub struct MemoryLogStore {
    records: Mutex<Vec<Vec<u8>>>,
    head: Mutex<Option<Vec<u8>>>,
    failing: AtomicBool,
    unreadable: AtomicBool,
}

impl MemoryLogStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// While set, every write fails.
    pub fn set_failing(&self, failing: bool) {
        self.failing.store(failing, Ordering::SeqCst);
    }

    /// While set, every read fails.
    pub fn set_unreadable(&self, unreadable: bool) {
        self.unreadable.store(unreadable, Ordering::SeqCst);
    }

    fn check_read(&self) -> Result<(), AuditError> {
        if self.unreadable.load(Ordering::SeqCst) {
            Err(AuditError::Unavailable("memory log store unreadable".into()))
        } else {
            Ok(())
        }
    }

    pub fn replace(&self, index: usize, record: Vec<u8>) {
        self.records.lock()[index] = record;
    }

    pub fn flip_bit(&self, index: usize, bit: usize) {
        self.records.lock()[index][bit / 8] ^= 1 << (bit % 8);
    }

    pub fn truncate(&self, len: usize) {
        self.records.lock().truncate(len);
    }

    /// Appends bypassing any higher-level bookkeeping, as an attacker with
    /// storage access would.
    pub fn inject(&self, record: Vec<u8>) {
        self.records.lock().push(record);
    }

    fn check(&self) -> Result<(), AuditError> {
        if self.failing.load(Ordering::SeqCst) {
            Err(AuditError::Unavailable("memory log store failing".into()))
        } else {
            Ok(())
        }
    }
}

impl LogStore for MemoryLogStore {
    fn append(&self, record: &[u8]) -> Result<(), AuditError> {
        self.check()?;
        self.records.lock().push(record.to_vec());
        Ok(())
    }

    fn read_all(&self) -> Result<Vec<Vec<u8>>, AuditError> {
        self.check_read()?;
        Ok(self.records.lock().clone())
    }

    fn len(&self) -> Result<usize, AuditError> {
        Ok(self.records.lock().len())
    }

    fn set_head(&self, head: &[u8]) -> Result<(), AuditError> {
        self.check()?;
        *self.head.lock() = Some(head.to_vec());
        Ok(())
    }

    fn head(&self) -> Result<Option<Vec<u8>>, AuditError> {
        self.check_read()?;
        Ok(self.head.lock().clone())
    }
}

/// Newline-delimited file plus a `<name>.head` sidecar.
#[derive(Debug)]
pub struct FileLogStore {
    path: PathBuf,
    head_path: PathBuf,
    file: Mutex<File>,
}

impl FileLogStore {
    pub fn open(path: impl AsRef<Path>) -> Result<Self, AuditError> {
        let path = path.as_ref().to_path_buf();
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent)?;
        }
        let file = OpenOptions::new().create(true).append(true).open(&path)?;
        let mut head_path = path.clone().into_os_string();
        head_path.push(".head");
        Ok(Self {
            path,
            head_path: head_path.into(),
            file: Mutex::new(file),
        })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }
}

impl LogStore for FileLogStore {
    fn append(&self, record: &[u8]) -> Result<(), AuditError> {
        if record.contains(&b'\n') {
            return Err(AuditError::Unavailable("record contains a newline".into()));
        }
        let mut file = self.file.lock();
        let mut line = Vec::with_capacity(record.len() + 1);
        line.extend_from_slice(record);
        line.push(b'\n');
        file.write_all(&line)?;
        file.sync_data()?;
        Ok(())
    }

    fn read_all(&self) -> Result<Vec<Vec<u8>>, AuditError> {
        let _guard = self.file.lock();
        let reader = BufReader::new(File::open(&self.path)?);
        let mut out = Vec::new();
        for line in reader.split(b'\n') {
            out.push(line?);
        }
        Ok(out)
    }

    fn len(&self) -> Result<usize, AuditError> {
        Ok(self.read_all()?.len())
    }

    fn set_head(&self, head: &[u8]) -> Result<(), AuditError> {
        let mut tmp = self.head_path.clone().into_os_string();
        tmp.push(".partial");
        fs::write(&tmp, head)?;
        fs::rename(&tmp, &self.head_path)?;
        Ok(())
    }

    fn head(&self) -> Result<Option<Vec<u8>>, AuditError> {
        match fs::read(&self.head_path) {
            Ok(bytes) => Ok(Some(bytes)),
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(None),
            Err(e) => Err(e.into()),
        }
    }
}
