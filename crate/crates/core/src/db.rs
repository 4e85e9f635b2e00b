//! Embedded relational store shared by the broker modules.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use parking_lot::Mutex;
use rusqlite::{Connection, Transaction};

const SCHEMA: &str = r#"
CREATE TABLE IF NOT EXISTS share_index (
    blob_id    TEXT NOT NULL,
    share_id   INTEGER NOT NULL,
    cloud_id   TEXT NOT NULL,
    object_key TEXT NOT NULL,
    stored_at  TEXT NOT NULL,
    PRIMARY KEY (blob_id, share_id)
);
CREATE TABLE IF NOT EXISTS orphans (
    cloud_id    TEXT NOT NULL,
    object_key  TEXT NOT NULL,
    recorded_at TEXT NOT NULL,
    PRIMARY KEY (cloud_id, object_key)
);
CREATE TABLE IF NOT EXISTS users (
    user_id         TEXT PRIMARY KEY,
    username        TEXT NOT NULL UNIQUE,
    password_hash   TEXT NOT NULL,
    kind            TEXT NOT NULL,
    attributes      TEXT NOT NULL,
    broker_id       INTEGER NOT NULL,
    acting_for      TEXT,
    key_id          TEXT,
    failed_attempts INTEGER NOT NULL DEFAULT 0,
    lockouts        INTEGER NOT NULL DEFAULT 0,
    locked_until    TEXT,
    created_at      TEXT NOT NULL
);
CREATE TABLE IF NOT EXISTS policies (
    file_id    TEXT PRIMARY KEY,
    owner      TEXT NOT NULL,
    policy     TEXT NOT NULL,
    created_at TEXT NOT NULL,
    updated_at TEXT NOT NULL
);
CREATE TABLE IF NOT EXISTS policy_history (
    id          INTEGER PRIMARY KEY AUTOINCREMENT,
    file_id     TEXT NOT NULL,
    owner       TEXT NOT NULL,
    policy      TEXT NOT NULL,
    recorded_at TEXT NOT NULL
);
CREATE TABLE IF NOT EXISTS revocations (
    patient_id   TEXT NOT NULL,
    scope        TEXT NOT NULL,
    subject_kind TEXT NOT NULL,
    subject      TEXT NOT NULL,
    created_at   TEXT NOT NULL,
    PRIMARY KEY (patient_id, scope, subject_kind, subject)
);
CREATE TABLE IF NOT EXISTS reviews (
    review_id    TEXT PRIMARY KEY,
    provider     TEXT NOT NULL,
    patient      TEXT NOT NULL,
    payload      BLOB NOT NULL,
    status       TEXT NOT NULL,
    submitted_at TEXT NOT NULL,
    decided_at   TEXT,
    target_file  TEXT
);
CREATE TABLE IF NOT EXISTS files (
    file_id    TEXT PRIMARY KEY,
    patient    TEXT NOT NULL,
    doc_id     TEXT NOT NULL,
    blob_id    TEXT NOT NULL,
    threshold  INTEGER NOT NULL,
    total      INTEGER NOT NULL,
    clouds     TEXT NOT NULL,
    emergency  INTEGER NOT NULL,
    version    INTEGER NOT NULL,
    created_at TEXT NOT NULL,
    updated_at TEXT NOT NULL
);
CREATE TABLE IF NOT EXISTS access_requests (
    request_id INTEGER PRIMARY KEY AUTOINCREMENT,
    requestor  TEXT NOT NULL,
    patient    TEXT NOT NULL,
    file_id    TEXT NOT NULL,
    message    TEXT NOT NULL,
    created_at TEXT NOT NULL
);
CREATE TABLE IF NOT EXISTS alerts (
    alert_id  TEXT PRIMARY KEY,
    dedup_key TEXT NOT NULL UNIQUE,
    body      TEXT NOT NULL,
    raised_at TEXT NOT NULL
);
CREATE TABLE IF NOT EXISTS alert_recipients (
    alert_id     TEXT NOT NULL,
    recipient    TEXT NOT NULL,
    acknowledged INTEGER NOT NULL DEFAULT 0,
    PRIMARY KEY (alert_id, recipient)
);
CREATE TABLE IF NOT EXISTS inspector_state (
    name  TEXT PRIMARY KEY,
    state TEXT NOT NULL
);
CREATE TABLE IF NOT EXISTS kmm_params (
    id             INTEGER PRIMARY KEY CHECK (id = 1),
    public_params  BLOB NOT NULL,
    master_secret  BLOB NOT NULL
);
"#;

/// Cloneable handle to one SQLite connection.
#[derive(Clone)]
pub struct Database {
    conn: Arc<Mutex<Connection>>,
    path: Option<PathBuf>,
}

impl std::fmt::Debug for Database {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Database").field("path", &self.path).finish()
    }
}

impl Database {
    pub fn open(path: impl AsRef<Path>) -> rusqlite::Result<Self> {
        let conn = Connection::open(path.as_ref())?;
        conn.pragma_update(None, "journal_mode", "WAL")?;
        conn.pragma_update(None, "synchronous", "NORMAL")?;
        Self::init(conn, Some(path.as_ref().to_path_buf()))
    }

    pub fn in_memory() -> rusqlite::Result<Self> {
        Self::init(Connection::open_in_memory()?, None)
    }

    fn init(conn: Connection, path: Option<PathBuf>) -> rusqlite::Result<Self> {
        conn.execute_batch(SCHEMA)?;
        Ok(Self {
            conn: Arc::new(Mutex::new(conn)),
            path,
        })
    }

    pub fn path(&self) -> Option<&Path> {
        self.path.as_deref()
    }

    pub fn with<T>(&self, f: impl FnOnce(&Connection) -> rusqlite::Result<T>) -> rusqlite::Result<T> {
        f(&self.conn.lock())
    }

    /// Runs `f` in a transaction; commits on `Ok`, rolls back on `Err`.
    pub fn transaction<T, E>(&self, f: impl FnOnce(&Transaction<'_>) -> Result<T, E>) -> Result<T, E>
    where
        E: From<rusqlite::Error>,
    {
        let mut conn = self.conn.lock();
        let tx = conn.transaction()?;
        let out = f(&tx)?;
        tx.commit()?;
        Ok(out)
    }

    /// Every text and blob cell in every table. Used by the key-retention
    /// scan.
    pub fn dump_cells(&self) -> rusqlite::Result<Vec<Vec<u8>>> {
        self.with(|conn| {
            let tables: Vec<String> = conn
                .prepare("SELECT name FROM sqlite_master WHERE type = 'table'")?
                .query_map([], |row| row.get(0))?
                .collect::<Result<_, _>>()?;
            let mut cells = Vec::new();
            for table in tables {
                let mut stmt = conn.prepare(&format!("SELECT * FROM \"{table}\""))?;
                let columns = stmt.column_count();
                let mut rows = stmt.query([])?;
                while let Some(row) = rows.next()? {
                    for i in 0..columns {
                        match row.get_ref(i)? {
                            rusqlite::types::ValueRef::Text(t) => cells.push(t.to_vec()),
                            rusqlite::types::ValueRef::Blob(b) => cells.push(b.to_vec()),
                            _ => {}
                        }
                    }
                }
            }
            Ok(cells)
        })
    }
}

pub(crate) fn now_text() -> String {
    chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Millis, true)
}

pub(crate) fn parse_time(text: &str) -> chrono::DateTime<chrono::Utc> {
    chrono::DateTime::parse_from_rfc3339(text)
        .map(|t| t.with_timezone(&chrono::Utc))
        .unwrap_or_default()
}
