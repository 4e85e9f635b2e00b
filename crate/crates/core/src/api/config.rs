use std::net::SocketAddr;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::ApiError;
use crate::storage::CloudBackendDescriptor;

/// Environment variable that overrides [`ApiConfig::listen`].
pub const ENV_LISTEN: &str = "HAB_LISTEN";
/// Environment variable that overrides [`ApiConfig::database`].
pub const ENV_DATABASE: &str = "HAB_DATABASE";

/// Service configuration, read from TOML.
///
/// ```toml
/// listen = "127.0.0.1:8080"
/// broker_count = 2
/// threshold = 3
/// total = 5
/// database = "hab.db"
/// aia_public_key = "9f2c...e1"
///
/// [[backends]]
/// cloud_id = "cloud-a"
/// kind = { type = "local-directory", root = "/var/lib/hab/cloud-a" }
/// ```
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ApiConfig {
    pub listen: SocketAddr,
    pub broker_count: u32,
    /// Default share threshold T offered to patient clients.
    pub threshold: usize,
    /// Default share count N; must not exceed the number of backends.
    pub total: usize,
    pub backends: Vec<CloudBackendDescriptor>,
    /// Failed logins before an account locks.
    pub attempt_limit: u32,
    pub lockout_secs: u64,
    pub session_ttl_secs: u64,
    /// Inspector pairing window applied to every rule.
    pub pairing_window_secs: u64,
    pub inspector_interval_ms: u64,
    /// SQLite file, or `:memory:`.
    pub database: PathBuf,
    /// Gatekeeper and Brokers' Log directory. Defaults to `<database>.logs`;
    /// in-memory logs when the database is in memory.
    pub log_dir: Option<PathBuf>,
    /// Optional inspection rule file replacing the bundled rules.
    pub rules: Option<PathBuf>,
    /// Hex ed25519 key of the attribute issuing authority.
    pub aia_public_key: Option<String>,
    /// Development only: derive the authority key from this seed instead.
    pub aia_dev_seed: Option<u64>,
    /// Bearer token that reads every alert queue.
    pub admin_token: Option<String>,
    /// Deterministic key material. Never set in production.
    pub test_seed: Option<u64>,
}

impl Default for ApiConfig {
    fn default() -> Self {
        Self {
            listen: "127.0.0.1:8080".parse().expect("valid address"),
            broker_count: 1,
            threshold: 3,
            total: 5,
            backends: (0..5)
                .map(|i| CloudBackendDescriptor::in_memory(&format!("cloud-{i}")))
                .collect(),
            attempt_limit: 5,
            lockout_secs: 60,
            session_ttl_secs: 3600,
            pairing_window_secs: 30,
            inspector_interval_ms: 1000,
            database: PathBuf::from(":memory:"),
            log_dir: None,
            rules: None,
            aia_public_key: None,
            aia_dev_seed: None,
            admin_token: None,
            test_seed: None,
        }
    }
}

impl ApiConfig {
    pub fn from_toml(text: &str) -> Result<Self, ApiError> {
        toml::from_str(text).map_err(|e| ApiError::Config(e.to_string()))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, ApiError> {
        let text = std::fs::read_to_string(path.as_ref())
            .map_err(|e| ApiError::Config(format!("{}: {e}", path.as_ref().display())))?;
        Self::from_toml(&text)
    }

    /// Applies [`ENV_LISTEN`] and [`ENV_DATABASE`] when set.
    pub fn with_env_overrides(mut self) -> Result<Self, ApiError> {
        if let Ok(listen) = std::env::var(ENV_LISTEN) {
            self.listen = listen
                .parse()
                .map_err(|e| ApiError::Config(format!("{ENV_LISTEN}={listen}: {e}")))?;
        }
        if let Ok(db) = std::env::var(ENV_DATABASE) {
            self.database = PathBuf::from(db);
        }
        Ok(self)
    }

    pub fn in_memory_database(&self) -> bool {
        self.database.as_os_str() == ":memory:"
    }

    pub fn resolved_log_dir(&self) -> Option<PathBuf> {
        if let Some(dir) = &self.log_dir {
            return Some(dir.clone());
        }
        if self.in_memory_database() {
            return None;
        }
        let mut dir = self.database.clone().into_os_string();
        dir.push(".logs");
        Some(dir.into())
    }

    pub fn validate(&self) -> Result<(), ApiError> {
        let fail = |m: String| Err(ApiError::Config(m));
        if self.broker_count == 0 {
            return fail("broker_count must be at least 1".into());
        }
        if self.threshold == 0 || self.threshold > self.total {
            return fail(format!("threshold {} must be in 1..={}", self.threshold, self.total));
        }
        if self.total > self.backends.len() {
            return fail(format!("total {} exceeds the {} configured backends", self.total, self.backends.len()));
        }
        if self.total > 255 {
            return fail("total must be at most 255".into());
        }
        if self.attempt_limit == 0 {
            return fail("attempt_limit must be at least 1".into());
        }
        if self.pairing_window_secs == 0 || self.inspector_interval_ms == 0 {
            return fail("pairing window and inspector interval must be positive".into());
        }
        let mut ids: Vec<_> = self.backends.iter().map(|b| &b.cloud_id).collect();
        ids.sort();
        if ids.windows(2).any(|w| w[0] == w[1]) {
            return fail("backend cloud ids must be distinct".into());
        }
        if self.aia_public_key.is_none() && self.aia_dev_seed.is_none() {
            return fail("one of aia_public_key or aia_dev_seed is required".into());
        }
        Ok(())
    }
}
