//! Authentication and access control: credentials, sessions, per-file
//! policies and mediated revocation.
//!
//! Revocation never touches ciphertexts or keys. The broker consults
//! [`AccessControl::check_access`] before any share leaves storage, so a
//! revocation is effective for the very next request.

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};
use std::time::Duration;

use argon2::password_hash::{PasswordHash, PasswordHasher, PasswordVerifier, SaltString};
use argon2::Argon2;
use chrono::{DateTime, Utc};
use parking_lot::{Mutex, RwLock};
use rand::rngs::OsRng;
use rand::RngCore;
use rusqlite::{params, OptionalExtension, Transaction};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::abe::{satisfies, Attribute, AttributeSet, PolicyError, PolicyTree};
use crate::db::{now_text, parse_time, Database};
use crate::ids::{BrokerId, FileId, UserId};

#[derive(Debug, Error)]
pub enum AccessError {
    #[error("username already registered")]
    UsernameTaken,
    #[error("invalid username or password")]
    BadCredentials,
    #[error("account locked until {until}")]
    AccountLocked { until: DateTime<Utc> },
    #[error("invalid session token")]
    InvalidSession,
    #[error("session expired")]
    SessionExpired,
    #[error("caller does not own this resource")]
    NotOwner,
    #[error("unknown file {0}")]
    UnknownFile(FileId),
    #[error("unknown user {0}")]
    UnknownUser(UserId),
    #[error("invalid username: {0}")]
    InvalidUsername(String),
    #[error("trusted contacts must name the patient they act for")]
    MissingPrincipal,
    #[error("password hashing failed")]
    Hash,
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error(transparent)]
    Db(#[from] rusqlite::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum UserKind {
    Patient,
    DataProvider,
    DataRequestor,
    Hospital,
    /// A carer holding a separate credential bound to one patient account.
    TrustedContact,
}

impl UserKind {
    pub fn as_str(self) -> &'static str {
        match self {
            UserKind::Patient => "patient",
            UserKind::DataProvider => "data-provider",
            UserKind::DataRequestor => "data-requestor",
            UserKind::Hospital => "hospital",
            UserKind::TrustedContact => "trusted-contact",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Some(match s {
            "patient" => UserKind::Patient,
            "data-provider" => UserKind::DataProvider,
            "data-requestor" => UserKind::DataRequestor,
            "hospital" => UserKind::Hospital,
            "trusted-contact" => UserKind::TrustedContact,
            _ => return None,
        })
    }
}

/// Public part of a credential. The password hash is kept in the store and
/// never leaves this module.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Credential {
    pub user_id: UserId,
    pub username: String,
    pub kind: UserKind,
    pub attributes: AttributeSet,
    pub broker_id: BrokerId,
    pub acting_for: Option<UserId>,
}

impl Credential {
    /// The patient on whose behalf this credential acts, if any.
    pub fn principal(&self) -> Option<&UserId> {
        match self.kind {
            UserKind::Patient => Some(&self.user_id),
            UserKind::TrustedContact => self.acting_for.as_ref(),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Session {
    pub token: String,
    pub user_id: UserId,
    pub kind: UserKind,
    pub broker_id: BrokerId,
    pub acting_for: Option<UserId>,
    pub issued_at: DateTime<Utc>,
    pub expires_at: DateTime<Utc>,
}

impl Session {
    pub fn principal(&self) -> Option<&UserId> {
        match self.kind {
            UserKind::Patient => Some(&self.user_id),
            UserKind::TrustedContact => self.acting_for.as_ref(),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PolicyRecord {
    pub file_id: FileId,
    pub owner: UserId,
    pub policy: PolicyTree,
    pub created_at: DateTime<Utc>,
    pub updated_at: DateTime<Utc>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "reason", rename_all = "kebab-case")]
pub enum DenyReason {
    GlobalRevoked,
    FileRevoked,
    AttributeRevoked { attribute: Attribute, global: bool },
    PolicyNotSatisfied,
    UnknownRequestor,
}

impl DenyReason {
    pub fn code(&self) -> &'static str {
        match self {
            DenyReason::GlobalRevoked => "global",
            DenyReason::FileRevoked => "revoked",
            DenyReason::AttributeRevoked { .. } => "attribute-revoked",
            DenyReason::PolicyNotSatisfied => "policy",
            DenyReason::UnknownRequestor => "unknown-requestor",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "decision", rename_all = "kebab-case")]
pub enum Decision {
    Allow,
    Deny(DenyReason),
}

impl Decision {
    pub fn is_allow(&self) -> bool {
        matches!(self, Decision::Allow)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(tag = "scope", content = "file_id", rename_all = "kebab-case")]
pub enum RevocationScope {
    File(FileId),
    Global,
}

impl RevocationScope {
    fn db_text(&self) -> String {
        match self {
            RevocationScope::File(f) => f.to_string(),
            RevocationScope::Global => "global".to_string(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(tag = "kind", content = "value", rename_all = "kebab-case")]
pub enum RevocationSubject {
    User(UserId),
    Attribute(Attribute),
}

#[derive(Debug, Default, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DenySet {
    pub users: BTreeSet<UserId>,
    pub attributes: BTreeSet<Attribute>,
}

/// Snapshot of one patient's revocation lists.
#[derive(Debug, Default, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RevocationState {
    pub patient: Option<UserId>,
    pub global: DenySet,
    pub files: BTreeMap<FileId, DenySet>,
}

#[derive(Debug, Default)]
struct Lists {
    users: HashSet<UserId>,
    attributes: HashSet<Attribute>,
}

impl Lists {
    fn is_empty(&self) -> bool {
        self.users.is_empty() && self.attributes.is_empty()
    }

    fn denies(&self, cred: &Credential) -> Option<Result<(), Attribute>> {
        if self.users.contains(&cred.user_id) {
            return Some(Ok(()));
        }
        if self.attributes.is_empty() {
            return None;
        }
        cred.attributes
            .iter()
            .find(|a| self.attributes.contains(*a))
            .map(|a| Err(a.clone()))
    }

    fn snapshot(&self) -> DenySet {
        DenySet {
            users: self.users.iter().cloned().collect(),
            attributes: self.attributes.iter().cloned().collect(),
        }
    }
}

#[derive(Debug, Default)]
struct PatientRevocations {
    global: Lists,
    files: HashMap<FileId, Lists>,
}

#[derive(Debug, Clone)]
pub struct AccessConfig {
    /// Consecutive failures that trigger a lockout.
    pub attempt_limit: u32,
    /// First lockout duration; doubles with each further lockout.
    pub base_lockout: Duration,
    pub session_ttl: Duration,
}

impl Default for AccessConfig {
    fn default() -> Self {
        Self {
            attempt_limit: 5,
            base_lockout: Duration::from_secs(60),
            session_ttl: Duration::from_secs(3600),
        }
    }
}

pub struct AccessControl {
    db: Database,
    config: AccessConfig,
    hasher: Argon2<'static>,
    dummy_hash: String,
    users: RwLock<HashMap<UserId, Credential>>,
    sessions: RwLock<HashMap<String, Session>>,
    policies: RwLock<HashMap<FileId, PolicyRecord>>,
    revocations: RwLock<HashMap<UserId, PatientRevocations>>,
    login_lock: Mutex<()>,
}

impl std::fmt::Debug for AccessControl {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("AccessControl")
            .field("users", &self.users.read().len())
            .field("policies", &self.policies.read().len())
            .finish_non_exhaustive()
    }
}

fn valid_username(name: &str) -> bool {
    (3..=64).contains(&name.len())
        && name
            .bytes()
            .all(|b| b.is_ascii_alphanumeric() || matches!(b, b'_' | b'-' | b'.' | b'@'))
}

impl AccessControl {
    /// Loads credentials, policies and revocation lists from `db`.
    pub fn open(db: Database, config: AccessConfig) -> Result<Self, AccessError> {
        let hasher = Argon2::default();
        let salt = SaltString::generate(&mut OsRng);
        let dummy_hash = hasher
            .hash_password(b"placeholder password", &salt)
            .map_err(|_| AccessError::Hash)?
            .to_string();
        let ac = Self {
            db,
            config,
            hasher,
            dummy_hash,
            users: RwLock::new(HashMap::new()),
            sessions: RwLock::new(HashMap::new()),
            policies: RwLock::new(HashMap::new()),
            revocations: RwLock::new(HashMap::new()),
            login_lock: Mutex::new(()),
        };
        ac.load()?;
        Ok(ac)
    }

    fn load(&self) -> Result<(), AccessError> {
        let users = self.db.with(|conn| {
            let mut stmt =
                conn.prepare("SELECT user_id, username, kind, attributes, broker_id, acting_for FROM users")?;
            let rows = stmt.query_map([], |row| {
                Ok((
                    row.get::<_, String>(0)?,
                    row.get::<_, String>(1)?,
                    row.get::<_, String>(2)?,
                    row.get::<_, String>(3)?,
                    row.get::<_, u32>(4)?,
                    row.get::<_, Option<String>>(5)?,
                ))
            })?;
            rows.collect::<Result<Vec<_>, _>>()
        })?;
        let mut map = self.users.write();
        for (id, username, kind, attrs, broker, acting_for) in users {
            let (Some(kind), Ok(attributes)) = (
                UserKind::parse(&kind),
                serde_json::from_str::<AttributeSet>(&attrs),
            ) else {
                continue;
            };
            map.insert(
                UserId(id.clone()),
                Credential {
                    user_id: UserId(id),
                    username,
                    kind,
                    attributes,
                    broker_id: BrokerId(broker),
                    acting_for: acting_for.map(UserId),
                },
            );
        }
        drop(map);

        let policies = self.db.with(|conn| {
            let mut stmt = conn.prepare("SELECT file_id, owner, policy, created_at, updated_at FROM policies")?;
            let rows = stmt.query_map([], |row| {
                Ok((
                    row.get::<_, String>(0)?,
                    row.get::<_, String>(1)?,
                    row.get::<_, String>(2)?,
                    row.get::<_, String>(3)?,
                    row.get::<_, String>(4)?,
                ))
            })?;
            rows.collect::<Result<Vec<_>, _>>()
        })?;
        let mut map = self.policies.write();
        for (file, owner, policy, created, updated) in policies {
            let (Ok(file_id), Ok(policy)) = (file.parse::<FileId>(), PolicyTree::parse(&policy)) else {
                continue;
            };
            map.insert(
                file_id,
                PolicyRecord {
                    file_id,
                    owner: UserId(owner),
                    policy,
                    created_at: parse_time(&created),
                    updated_at: parse_time(&updated),
                },
            );
        }
        drop(map);

        let rows = self.db.with(|conn| {
            let mut stmt = conn.prepare("SELECT patient_id, scope, subject_kind, subject FROM revocations")?;
            let rows = stmt.query_map([], |row| {
                Ok((
                    row.get::<_, String>(0)?,
                    row.get::<_, String>(1)?,
                    row.get::<_, String>(2)?,
                    row.get::<_, String>(3)?,
                ))
            })?;
            rows.collect::<Result<Vec<_>, _>>()
        })?;
        let mut revs = self.revocations.write();
        for (patient, scope, kind, subject) in rows {
            let entry = revs.entry(UserId(patient)).or_default();
            let lists = if scope == "global" {
                &mut entry.global
            } else {
                match scope.parse() {
                    Ok(f) => entry.files.entry(f).or_default(),
                    Err(_) => continue,
                }
            };
            match kind.as_str() {
                "user" => {
                    lists.users.insert(UserId(subject));
                }
                "attribute" => {
                    if let Ok(a) = Attribute::new(&subject) {
                        lists.attributes.insert(a);
                    }
                }
                _ => {}
            }
        }
        Ok(())
    }

    pub fn config(&self) -> &AccessConfig {
        &self.config
    }

    /// Creates a credential. Attribute issuance and broker assignment are
    /// the caller's responsibility.
    pub fn create_credential(
        &self,
        username: &str,
        password: &str,
        kind: UserKind,
        attributes: AttributeSet,
        broker_id: BrokerId,
        acting_for: Option<UserId>,
    ) -> Result<Credential, AccessError> {
        if !valid_username(username) {
            return Err(AccessError::InvalidUsername(username.to_string()));
        }
        if kind == UserKind::TrustedContact {
            let patient = acting_for.as_ref().ok_or(AccessError::MissingPrincipal)?;
            match self.credential(patient) {
                Some(c) if c.kind == UserKind::Patient => {}
                _ => return Err(AccessError::UnknownUser(patient.clone())),
            }
        }
        let user_id = UserId::for_username(username);
        if self.users.read().contains_key(&user_id) {
            return Err(AccessError::UsernameTaken);
        }
        let salt = SaltString::generate(&mut OsRng);
        let hash = self
            .hasher
            .hash_password(password.as_bytes(), &salt)
            .map_err(|_| AccessError::Hash)?
            .to_string();
        let cred = Credential {
            user_id: user_id.clone(),
            username: username.to_string(),
            kind,
            attributes,
            broker_id,
            acting_for: if kind == UserKind::TrustedContact { acting_for } else { None },
        };
        let attrs_json = serde_json::to_string(&cred.attributes).expect("attribute set serializes");
        let inserted = self.db.with(|conn| {
            conn.execute(
                "INSERT OR IGNORE INTO users (user_id, username, password_hash, kind, attributes, broker_id, acting_for, created_at)
                 VALUES (?1, ?2, ?3, ?4, ?5, ?6, ?7, ?8)",
                params![
                    user_id.as_str(),
                    username,
                    hash,
                    kind.as_str(),
                    attrs_json,
                    broker_id.0,
                    cred.acting_for.as_ref().map(UserId::as_str),
                    now_text()
                ],
            )
        })?;
        if inserted == 0 {
            return Err(AccessError::UsernameTaken);
        }
        self.users.write().insert(user_id, cred.clone());
        Ok(cred)
    }

    pub fn credential(&self, user: &UserId) -> Option<Credential> {
        self.users.read().get(user).cloned()
    }

    pub fn credential_by_username(&self, username: &str) -> Option<Credential> {
        self.credential(&UserId::for_username(username))
    }

    pub fn users(&self) -> Vec<Credential> {
        let mut all: Vec<_> = self.users.read().values().cloned().collect();
        all.sort_by(|a, b| a.user_id.cmp(&b.user_id));
        all
    }

    /// Verifies a password and opens a session. Unknown usernames take the
    /// same path as wrong passwords.
    pub fn authenticate(&self, username: &str, password: &str) -> Result<Session, AccessError> {
        let user_id = UserId::for_username(username);
        let _guard = self.login_lock.lock();
        let row = self.db.with(|conn| {
            conn.query_row(
                "SELECT password_hash, failed_attempts, lockouts, locked_until FROM users WHERE user_id = ?1",
                [user_id.as_str()],
                |row| {
                    Ok((
                        row.get::<_, String>(0)?,
                        row.get::<_, u32>(1)?,
                        row.get::<_, u32>(2)?,
                        row.get::<_, Option<String>>(3)?,
                    ))
                },
            )
            .optional()
        })?;
        let Some((hash, failures, lockouts, locked_until)) = row else {
            let _ = self.verify(&self.dummy_hash, password);
            return Err(AccessError::BadCredentials);
        };
        let now = Utc::now();
        if let Some(until) = locked_until.as_deref().map(parse_time) {
            if until > now {
                return Err(AccessError::AccountLocked { until });
            }
        }
        if self.verify(&hash, password) {
            self.db.with(|conn| {
                conn.execute(
                    "UPDATE users SET failed_attempts = 0, locked_until = NULL WHERE user_id = ?1",
                    [user_id.as_str()],
                )
            })?;
            let cred = self.credential(&user_id).ok_or(AccessError::BadCredentials)?;
            return Ok(self.open_session(&cred));
        }

        let failures = failures + 1;
        if failures >= self.config.attempt_limit {
            let factor = 1u32 << lockouts.min(16);
            let until = now
                + chrono::Duration::from_std(self.config.base_lockout * factor)
                    .unwrap_or(chrono::Duration::MAX);
            let until_text = until.to_rfc3339_opts(chrono::SecondsFormat::Millis, true);
            self.db.with(|conn| {
                conn.execute(
                    "UPDATE users SET failed_attempts = 0, lockouts = lockouts + 1, locked_until = ?2 WHERE user_id = ?1",
                    params![user_id.as_str(), until_text],
                )
            })?;
        } else {
            self.db.with(|conn| {
                conn.execute(
                    "UPDATE users SET failed_attempts = ?2 WHERE user_id = ?1",
                    params![user_id.as_str(), failures],
                )
            })?;
        }
        Err(AccessError::BadCredentials)
    }

    fn verify(&self, hash: &str, password: &str) -> bool {
        PasswordHash::new(hash)
            .map(|parsed| self.hasher.verify_password(password.as_bytes(), &parsed).is_ok())
            .unwrap_or(false)
    }

    fn open_session(&self, cred: &Credential) -> Session {
        let mut token = [0u8; 32];
        OsRng.fill_bytes(&mut token);
        let issued_at = Utc::now();
        let session = Session {
            token: hex::encode(token),
            user_id: cred.user_id.clone(),
            kind: cred.kind,
            broker_id: cred.broker_id,
            acting_for: cred.acting_for.clone(),
            issued_at,
            expires_at: issued_at
                + chrono::Duration::from_std(self.config.session_ttl).unwrap_or(chrono::Duration::MAX),
        };
        self.sessions.write().insert(session.token.clone(), session.clone());
        session
    }

    pub fn validate_session(&self, token: &str) -> Result<Session, AccessError> {
        let session = self
            .sessions
            .read()
            .get(token)
            .cloned()
            .ok_or(AccessError::InvalidSession)?;
        if session.expires_at <= Utc::now() {
            self.sessions.write().remove(token);
            return Err(AccessError::SessionExpired);
        }
        Ok(session)
    }

    pub fn logout(&self, token: &str) -> bool {
        self.sessions.write().remove(token).is_some()
    }

    pub fn policy(&self, file_id: FileId) -> Option<PolicyRecord> {
        self.policies.read().get(&file_id).cloned()
    }

    pub fn files_of(&self, owner: &UserId) -> Vec<FileId> {
        let mut files: Vec<_> = self
            .policies
            .read()
            .values()
            .filter(|r| &r.owner == owner)
            .map(|r| r.file_id)
            .collect();
        files.sort();
        files
    }

    /// Replaces the active policy of an existing file. Only the owning
    /// patient (or their trusted contact) may do so.
    pub fn store_policy(
        &self,
        session: &Session,
        file_id: FileId,
        policy: PolicyTree,
    ) -> Result<PolicyRecord, AccessError> {
        let current = self.policy(file_id).ok_or(AccessError::UnknownFile(file_id))?;
        if session.principal() != Some(&current.owner) {
            return Err(AccessError::NotOwner);
        }
        let record = self.db.transaction(|tx| self.write_policy(tx, &current.owner, file_id, &policy))?;
        self.cache_policy(record.clone());
        Ok(record)
    }

    /// Writes a policy row and its history entry inside a caller-owned
    /// transaction. The in-memory view changes only when the caller passes
    /// the result to [`Self::cache_policy`] after committing.
    pub(crate) fn write_policy(
        &self,
        tx: &Transaction<'_>,
        owner: &UserId,
        file_id: FileId,
        policy: &PolicyTree,
    ) -> Result<PolicyRecord, AccessError> {
        let now = now_text();
        let text = policy.to_string();
        let created: String = tx
            .query_row(
                "SELECT created_at FROM policies WHERE file_id = ?1",
                [file_id.to_string()],
                |row| row.get(0),
            )
            .optional()?
            .unwrap_or_else(|| now.clone());
        tx.execute(
            "INSERT INTO policies (file_id, owner, policy, created_at, updated_at) VALUES (?1, ?2, ?3, ?4, ?5)
             ON CONFLICT(file_id) DO UPDATE SET policy = excluded.policy, updated_at = excluded.updated_at",
            params![file_id.to_string(), owner.as_str(), text, created, now],
        )?;
        tx.execute(
            "INSERT INTO policy_history (file_id, owner, policy, recorded_at) VALUES (?1, ?2, ?3, ?4)",
            params![file_id.to_string(), owner.as_str(), text, now],
        )?;
        Ok(PolicyRecord {
            file_id,
            owner: owner.clone(),
            policy: policy.clone(),
            created_at: parse_time(&created),
            updated_at: parse_time(&now),
        })
    }

    pub(crate) fn cache_policy(&self, record: PolicyRecord) {
        self.policies.write().insert(record.file_id, record);
    }

    /// All recorded policy versions of a file as newline-delimited JSON.
    pub fn policy_history_ndjson(&self, file_id: FileId) -> Result<String, AccessError> {
        let rows = self.db.with(|conn| {
            let mut stmt = conn.prepare(
                "SELECT owner, policy, recorded_at FROM policy_history WHERE file_id = ?1 ORDER BY id",
            )?;
            let rows = stmt.query_map([file_id.to_string()], |row| {
                Ok((row.get::<_, String>(0)?, row.get::<_, String>(1)?, row.get::<_, String>(2)?))
            })?;
            rows.collect::<Result<Vec<_>, _>>()
        })?;
        let mut out = String::new();
        for (owner, policy, at) in rows {
            let line = serde_json::json!({
                "file_id": file_id.to_string(),
                "owner": owner,
                "policy": policy,
                "recorded_at": at,
            });
            out.push_str(&line.to_string());
            out.push('\n');
        }
        Ok(out)
    }

    /// Mediated access decision. Order: global deny list, then the file's
    /// revocation list, then policy satisfaction.
    pub fn check_access(&self, requestor: &UserId, file_id: FileId) -> Result<Decision, AccessError> {
        let policies = self.policies.read();
        let record = policies.get(&file_id).ok_or(AccessError::UnknownFile(file_id))?;
        let Some(cred) = self.users.read().get(requestor).cloned() else {
            return Ok(Decision::Deny(DenyReason::UnknownRequestor));
        };
        let revocations = self.revocations.read();
        if let Some(revs) = revocations.get(&record.owner) {
            match revs.global.denies(&cred) {
                Some(Ok(())) => return Ok(Decision::Deny(DenyReason::GlobalRevoked)),
                Some(Err(attribute)) => {
                    return Ok(Decision::Deny(DenyReason::AttributeRevoked { attribute, global: true }))
                }
                None => {}
            }
            match revs.files.get(&file_id).and_then(|l| l.denies(&cred)) {
                Some(Ok(())) => return Ok(Decision::Deny(DenyReason::FileRevoked)),
                Some(Err(attribute)) => {
                    return Ok(Decision::Deny(DenyReason::AttributeRevoked { attribute, global: false }))
                }
                None => {}
            }
        }
        if satisfies(&record.policy, &cred.attributes) {
            Ok(Decision::Allow)
        } else {
            Ok(Decision::Deny(DenyReason::PolicyNotSatisfied))
        }
    }

    fn authorize_revocation(&self, session: &Session, scope: &RevocationScope) -> Result<UserId, AccessError> {
        let patient = session.principal().cloned().ok_or(AccessError::NotOwner)?;
        if let RevocationScope::File(file_id) = scope {
            let owner = self
                .policies
                .read()
                .get(file_id)
                .map(|r| r.owner.clone())
                .ok_or(AccessError::UnknownFile(*file_id))?;
            if owner != patient {
                return Err(AccessError::NotOwner);
            }
        }
        Ok(patient)
    }

    /// Adds a user to a deny list. Takes effect for the next
    /// [`Self::check_access`] call.
    pub fn revoke(
        &self,
        session: &Session,
        target: &UserId,
        scope: RevocationScope,
    ) -> Result<RevocationState, AccessError> {
        self.set_revocation(session, RevocationSubject::User(target.clone()), scope, true)
    }

    pub fn unrevoke(
        &self,
        session: &Session,
        target: &UserId,
        scope: RevocationScope,
    ) -> Result<RevocationState, AccessError> {
        self.set_revocation(session, RevocationSubject::User(target.clone()), scope, false)
    }

    /// Denies every holder of `attribute`. Evaluated as a predicate during
    /// the access check, so users registered later are covered too.
    pub fn revoke_attribute(
        &self,
        session: &Session,
        attribute: &Attribute,
        scope: RevocationScope,
    ) -> Result<RevocationState, AccessError> {
        self.set_revocation(session, RevocationSubject::Attribute(attribute.clone()), scope, true)
    }

    pub fn unrevoke_attribute(
        &self,
        session: &Session,
        attribute: &Attribute,
        scope: RevocationScope,
    ) -> Result<RevocationState, AccessError> {
        self.set_revocation(session, RevocationSubject::Attribute(attribute.clone()), scope, false)
    }

    pub fn set_revocation(
        &self,
        session: &Session,
        subject: RevocationSubject,
        scope: RevocationScope,
        revoked: bool,
    ) -> Result<RevocationState, AccessError> {
        let patient = self.authorize_revocation(session, &scope)?;
        let (kind, value) = match &subject {
            RevocationSubject::User(u) => ("user", u.as_str().to_string()),
            RevocationSubject::Attribute(a) => ("attribute", a.as_str().to_string()),
        };
        let mut revs = self.revocations.write();
        self.db.with(|conn| {
            if revoked {
                conn.execute(
                    "INSERT OR IGNORE INTO revocations (patient_id, scope, subject_kind, subject, created_at)
                     VALUES (?1, ?2, ?3, ?4, ?5)",
                    params![patient.as_str(), scope.db_text(), kind, value, now_text()],
                )
            } else {
                conn.execute(
                    "DELETE FROM revocations WHERE patient_id = ?1 AND scope = ?2 AND subject_kind = ?3 AND subject = ?4",
                    params![patient.as_str(), scope.db_text(), kind, value],
                )
            }
        })?;
        let entry = revs.entry(patient.clone()).or_default();
        let lists = match &scope {
            RevocationScope::Global => &mut entry.global,
            RevocationScope::File(f) => entry.files.entry(*f).or_default(),
        };
        match (subject, revoked) {
            (RevocationSubject::User(u), true) => {
                lists.users.insert(u);
            }
            (RevocationSubject::User(u), false) => {
                lists.users.remove(&u);
            }
            (RevocationSubject::Attribute(a), true) => {
                lists.attributes.insert(a);
            }
            (RevocationSubject::Attribute(a), false) => {
                lists.attributes.remove(&a);
            }
        }
        if let RevocationScope::File(f) = scope {
            if entry.files.get(&f).is_some_and(Lists::is_empty) {
                entry.files.remove(&f);
            }
        }
        Ok(Self::snapshot(&patient, entry))
    }

    fn snapshot(patient: &UserId, revs: &PatientRevocations) -> RevocationState {
        RevocationState {
            patient: Some(patient.clone()),
            global: revs.global.snapshot(),
            files: revs.files.iter().map(|(f, l)| (*f, l.snapshot())).collect(),
        }
    }

    pub fn revocation_state(&self, patient: &UserId) -> RevocationState {
        self.revocations
            .read()
            .get(patient)
            .map(|r| Self::snapshot(patient, r))
            .unwrap_or_else(|| RevocationState {
                patient: Some(patient.clone()),
                ..Default::default()
            })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::time::Instant;

    fn attrs(names: &[&str]) -> AttributeSet {
        AttributeSet::from_names(names.iter().copied()).unwrap()
    }

    fn setup() -> (AccessControl, Session, Credential) {
        let ac = AccessControl::open(Database::in_memory().unwrap(), AccessConfig::default()).unwrap();
        ac.create_credential("alice", "alice-pw", UserKind::Patient, attrs(&["patient"]), BrokerId(0), None)
            .unwrap();
        let dr = ac
            .create_credential(
                "drbob",
                "bob-pw",
                UserKind::DataRequestor,
                attrs(&["doctor", "cardiology", "hospitala"]),
                BrokerId(1),
                None,
            )
            .unwrap();
        let session = ac.authenticate("alice", "alice-pw").unwrap();
        (ac, session, dr)
    }

    fn add_file(ac: &AccessControl, owner: &UserId, policy: &str) -> FileId {
        let file = FileId::random();
        let rec = ac
            .db
            .transaction(|tx| ac.write_policy(tx, owner, file, &PolicyTree::parse(policy).unwrap()))
            .unwrap();
        ac.cache_policy(rec);
        file
    }

    #[test]
    fn login_and_lockout() {
        let (ac, session, _) = setup();
        assert_eq!(session.broker_id, BrokerId(0));
        assert_eq!(session.token.len(), 64);
        for _ in 0..5 {
            assert!(matches!(ac.authenticate("alice", "wrong"), Err(AccessError::BadCredentials)));
        }
        assert!(matches!(
            ac.authenticate("alice", "alice-pw"),
            Err(AccessError::AccountLocked { .. })
        ));
        assert!(matches!(ac.authenticate("nobody", "x"), Err(AccessError::BadCredentials)));
    }

    #[test]
    fn lockout_grows_exponentially() {
        let config = AccessConfig {
            base_lockout: Duration::from_millis(50),
            attempt_limit: 2,
            ..Default::default()
        };
        let ac = AccessControl::open(Database::in_memory().unwrap(), config).unwrap();
        ac.create_credential("carol", "pw", UserKind::Patient, attrs(&["patient"]), BrokerId(0), None)
            .unwrap();
        let mut spans = Vec::new();
        for _ in 0..2 {
            for _ in 0..2 {
                let _ = ac.authenticate("carol", "bad");
            }
            let Err(AccessError::AccountLocked { until }) = ac.authenticate("carol", "pw") else {
                panic!("expected lockout");
            };
            spans.push((until - Utc::now()).num_milliseconds());
            std::thread::sleep(Duration::from_millis(until.signed_duration_since(Utc::now()).num_milliseconds().max(0) as u64 + 5));
        }
        assert!(spans[1] > spans[0] + 20, "{spans:?}");
        assert!(ac.authenticate("carol", "pw").is_ok());
    }

    #[test]
    fn sessions_expire() {
        let config = AccessConfig {
            session_ttl: Duration::from_millis(1),
            ..Default::default()
        };
        let ac = AccessControl::open(Database::in_memory().unwrap(), config).unwrap();
        ac.create_credential("dave", "pw", UserKind::Patient, attrs(&["patient"]), BrokerId(0), None)
            .unwrap();
        let s = ac.authenticate("dave", "pw").unwrap();
        std::thread::sleep(Duration::from_millis(5));
        assert!(matches!(ac.validate_session(&s.token), Err(AccessError::SessionExpired)));
        assert!(matches!(ac.validate_session("deadbeef"), Err(AccessError::InvalidSession)));
    }

    #[test]
    fn duplicate_username_rejected() {
        let (ac, _, _) = setup();
        let err = ac
            .create_credential("ALICE", "x", UserKind::Patient, attrs(&["patient"]), BrokerId(0), None)
            .unwrap_err();
        assert!(matches!(err, AccessError::UsernameTaken));
    }

    #[test]
    fn policy_store_and_check() {
        let (ac, session, dr) = setup();
        let file = add_file(&ac, &session.user_id, "admin");
        assert_eq!(
            ac.check_access(&dr.user_id, file).unwrap(),
            Decision::Deny(DenyReason::PolicyNotSatisfied)
        );
        ac.store_policy(&session, file, PolicyTree::parse("doctor AND cardiology").unwrap())
            .unwrap();
        assert_eq!(ac.check_access(&dr.user_id, file).unwrap(), Decision::Allow);
        let dr_session = ac.authenticate("drbob", "bob-pw").unwrap();
        assert!(matches!(
            ac.store_policy(&dr_session, file, PolicyTree::parse("doctor").unwrap()),
            Err(AccessError::NotOwner)
        ));
        assert!(matches!(
            ac.check_access(&dr.user_id, FileId::random()),
            Err(AccessError::UnknownFile(_))
        ));
        assert_eq!(ac.policy_history_ndjson(file).unwrap().lines().count(), 2);
    }

    #[test]
    fn revocation_order_and_immediacy() {
        let (ac, session, dr) = setup();
        let file = add_file(&ac, &session.user_id, "doctor");
        let other = add_file(&ac, &session.user_id, "doctor");

        let start = Instant::now();
        ac.revoke(&session, &dr.user_id, RevocationScope::File(file)).unwrap();
        assert!(start.elapsed() < Duration::from_millis(10));
        assert_eq!(ac.check_access(&dr.user_id, file).unwrap(), Decision::Deny(DenyReason::FileRevoked));
        assert_eq!(ac.check_access(&dr.user_id, other).unwrap(), Decision::Allow);

        ac.revoke(&session, &dr.user_id, RevocationScope::Global).unwrap();
        assert_eq!(ac.check_access(&dr.user_id, file).unwrap(), Decision::Deny(DenyReason::GlobalRevoked));
        assert_eq!(ac.check_access(&dr.user_id, other).unwrap(), Decision::Deny(DenyReason::GlobalRevoked));

        ac.unrevoke(&session, &dr.user_id, RevocationScope::Global).unwrap();
        ac.unrevoke(&session, &dr.user_id, RevocationScope::File(file)).unwrap();
        assert_eq!(ac.check_access(&dr.user_id, file).unwrap(), Decision::Allow);
        assert_eq!(ac.revocation_state(&session.user_id), RevocationState {
            patient: Some(session.user_id.clone()),
            ..Default::default()
        });
    }

    #[test]
    fn attribute_revocation_is_a_predicate() {
        let (ac, session, dr) = setup();
        let file = add_file(&ac, &session.user_id, "doctor");
        let clinic = Attribute::new("internA-clinic").unwrap();
        ac.revoke_attribute(&session, &Attribute::new("unheld").unwrap(), RevocationScope::Global)
            .unwrap();
        assert_eq!(ac.check_access(&dr.user_id, file).unwrap(), Decision::Allow);
        ac.revoke_attribute(&session, &clinic, RevocationScope::Global).unwrap();
        let intern = ac
            .create_credential(
                "intern1",
                "pw",
                UserKind::DataRequestor,
                attrs(&["doctor", "interna-clinic"]),
                BrokerId(0),
                None,
            )
            .unwrap();
        assert!(matches!(
            ac.check_access(&intern.user_id, file).unwrap(),
            Decision::Deny(DenyReason::AttributeRevoked { global: true, .. })
        ));
        assert_eq!(ac.check_access(&dr.user_id, file).unwrap(), Decision::Allow);
    }

    #[test]
    fn only_owner_revokes() {
        let (ac, session, dr) = setup();
        let file = add_file(&ac, &session.user_id, "doctor");
        let dr_session = ac.authenticate("drbob", "bob-pw").unwrap();
        assert!(matches!(
            ac.revoke(&dr_session, &dr.user_id, RevocationScope::File(file)),
            Err(AccessError::NotOwner)
        ));
        let carer = ac
            .create_credential(
                "carer",
                "pw",
                UserKind::TrustedContact,
                attrs(&["carer"]),
                BrokerId(0),
                Some(session.user_id.clone()),
            )
            .unwrap();
        let carer_session = ac.authenticate(&carer.username, "pw").unwrap();
        ac.revoke(&carer_session, &dr.user_id, RevocationScope::File(file)).unwrap();
        assert!(!ac.check_access(&dr.user_id, file).unwrap().is_allow());
    }

    #[test]
    fn state_survives_reopen() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("hab.db");
        let (file, patient, dr) = {
            let ac = AccessControl::open(Database::open(&path).unwrap(), AccessConfig::default()).unwrap();
            let p = ac
                .create_credential("erin", "pw", UserKind::Patient, attrs(&["patient"]), BrokerId(0), None)
                .unwrap();
            let d = ac
                .create_credential("frank", "pw", UserKind::DataRequestor, attrs(&["doctor"]), BrokerId(0), None)
                .unwrap();
            let file = add_file(&ac, &p.user_id, "doctor");
            let s = ac.authenticate("erin", "pw").unwrap();
            ac.revoke(&s, &d.user_id, RevocationScope::File(file)).unwrap();
            (file, p.user_id, d.user_id)
        };
        let ac = AccessControl::open(Database::open(&path).unwrap(), AccessConfig::default()).unwrap();
        assert_eq!(ac.policy(file).unwrap().owner, patient);
        assert_eq!(ac.check_access(&dr, file).unwrap(), Decision::Deny(DenyReason::FileRevoked));
    }

    #[test]
    fn hashes_never_serialized() {
        let (ac, _, dr) = setup();
        let json = serde_json::to_string(&ac.credential(&dr.user_id).unwrap()).unwrap();
        assert!(!json.contains("argon2"));
        assert!(!json.contains("bob-pw"));
    }
}
