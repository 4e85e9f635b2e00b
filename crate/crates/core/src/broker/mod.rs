//! The broker: registration and key issuance, patient-reviewed uploads,
//! mediated retrieval and break-glass emergency access.
//!
//! Every entry point records the user request with the [`Gatekeeper`]
//! first, then logs each action to the [`BrokerLog`] before performing it.
//! If either log cannot be written the request fails.

pub mod aia;

use std::collections::{BTreeMap, HashMap};
use std::sync::Arc;

use chrono::{DateTime, Utc};
use ed25519_dalek::VerifyingKey;
use parking_lot::Mutex;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use rusqlite::{params, OptionalExtension};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::abe::{
    self, AbeError, Attribute, AttributeSet, EncryptedDocument, MasterSecret, PolicyTree, PublicParams, UserKey,
    EMERGENCY_ATTRIBUTE,
};
use crate::access::{
    AccessConfig, AccessControl, AccessError, Decision, DenyReason, PolicyRecord, RevocationScope,
    RevocationState, RevocationSubject, Session, UserKind,
};
use crate::audit::{
    Alert, AlertKind, AlertStore, AuditError, BrokerLog, ChainStatus, Finding, Gatekeeper, Inspector, Module,
    RequestKind, RuleSet, Severity,
};
use crate::client::patient_attribute;
use crate::db::{now_text, parse_time, Database};
use crate::ids::{BlobId, BrokerId, CloudId, DocId, FileId, ReviewId, UserId};
use crate::sharing::{self, SharingError};
use crate::storage::{MultiCloudProxy, StorageError};

use aia::{verify_grant, AttributeGrant, GrantError};

/// Gatekeeper user recorded for requests without a valid session.
pub const ANONYMOUS: &str = "anonymous";
/// Gatekeeper user recorded for broker maintenance tasks.
pub const SYSTEM: &str = "system";

#[derive(Debug, Error)]
pub enum BrokerError {
    #[error("not authenticated: {0}")]
    Unauthorized(#[source] AccessError),
    #[error("forbidden: {0}")]
    Forbidden(String),
    #[error("caller does not own this resource")]
    NotOwner,
    #[error("{0} not found")]
    NotFound(String),
    #[error("access denied ({})", reason.code())]
    AccessDenied {
        reason: DenyReason,
        access_request: Option<i64>,
    },
    #[error("invalid attribute grant: {0}")]
    InvalidGrant(#[from] GrantError),
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("review {0} has already been decided")]
    ReviewClosed(ReviewId),
    #[error(transparent)]
    Access(AccessError),
    #[error(transparent)]
    Storage(#[from] StorageError),
    #[error(transparent)]
    Sharing(#[from] SharingError),
    #[error(transparent)]
    Crypto(#[from] AbeError),
    #[error("audit log unavailable: {0}")]
    Audit(#[from] AuditError),
    #[error(transparent)]
    Db(#[from] rusqlite::Error),
    #[error("injected fault: {0}")]
    InjectedFault(&'static str),
}

impl From<AccessError> for BrokerError {
    fn from(e: AccessError) -> Self {
        match e {
            AccessError::NotOwner => BrokerError::NotOwner,
            AccessError::UnknownFile(f) => BrokerError::NotFound(format!("file {f}")),
            AccessError::InvalidSession | AccessError::SessionExpired => BrokerError::Unauthorized(e),
            other => BrokerError::Access(other),
        }
    }
}

/// Fault injection points for crash-consistency tests.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Failpoint {
    /// Abort an approval after shares are uploaded but before the policy
    /// and file record are committed.
    AfterShareUpload,
}

#[derive(Debug, Clone)]
pub struct HabConfig {
    pub broker_count: u32,
    pub default_threshold: usize,
    pub security_level: u16,
    /// Deterministic parameter generation; tests only.
    pub test_seed: Option<u64>,
    pub access: AccessConfig,
    pub rules: RuleSet,
}

impl Default for HabConfig {
    fn default() -> Self {
        Self {
            broker_count: 1,
            default_threshold: 3,
            security_level: abe::SUPPORTED_SECURITY_LEVEL,
            test_seed: None,
            access: AccessConfig::default(),
            rules: RuleSet::default_rules(),
        }
    }
}

/// Maps a user to a broker partition. Pure in `user` and `broker_count`.
pub fn broker_for(user: &UserId, broker_count: u32) -> BrokerId {
    let digest = Sha256::digest(user.as_str().as_bytes());
    let n = u32::from_be_bytes(digest[..4].try_into().expect("4 bytes"));
    BrokerId(n % broker_count.max(1))
}

#[derive(Debug, Clone)]
pub struct Registration {
    pub user_id: UserId,
    pub broker_id: BrokerId,
    pub kind: UserKind,
    pub attributes: AttributeSet,
    /// Returned to the client only; the service keeps no copy.
    pub key: UserKey,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ReviewStatus {
    Pending,
    Approved,
    Rejected,
}

impl ReviewStatus {
    fn parse(s: &str) -> Self {
        match s {
            "approved" => ReviewStatus::Approved,
            "rejected" => ReviewStatus::Rejected,
            _ => ReviewStatus::Pending,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReviewItem {
    pub review_id: ReviewId,
    pub provider: UserId,
    pub patient: UserId,
    /// Opaque to the service; normally sealed for the patient.
    #[serde(with = "crate::b64")]
    pub payload: Vec<u8>,
    pub status: ReviewStatus,
    pub submitted_at: DateTime<Utc>,
    pub decided_at: Option<DateTime<Utc>>,
    pub target_file: Option<FileId>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FileMeta {
    pub file_id: FileId,
    pub patient: UserId,
    pub doc_id: DocId,
    pub blob_id: BlobId,
    pub threshold: usize,
    pub total: usize,
    pub clouds: Vec<CloudId>,
    pub emergency: bool,
    pub version: u32,
    pub created_at: DateTime<Utc>,
    pub updated_at: DateTime<Utc>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AccessRequest {
    pub request_id: i64,
    pub requestor: UserId,
    pub patient: UserId,
    pub file_id: FileId,
    pub message: String,
    pub created_at: DateTime<Utc>,
}

/// What the patient client sends with an approval.
#[derive(Debug, Clone)]
pub struct Approval {
    pub policy: PolicyTree,
    pub clouds: Vec<CloudId>,
    pub threshold: usize,
    /// Serialized [`EncryptedDocument`] produced on the patient's device.
    pub document: Vec<u8>,
}

#[derive(Debug, Clone)]
pub enum ReviewDecision {
    Approve(Approval),
    Reject,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum DecisionOutcome {
    Approved(FileMeta),
    Rejected(ReviewItem),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EmergencyBundle {
    pub patient: UserId,
    pub file_id: FileId,
    /// Full document including the emergency wrap.
    #[serde(with = "crate::b64")]
    pub document: Vec<u8>,
}

fn kv<const N: usize>(pairs: [(&str, String); N]) -> BTreeMap<String, String> {
    pairs.into_iter().map(|(k, v)| (k.to_string(), v)).collect()
}

struct Kmm {
    pp: PublicParams,
    msk: MasterSecret,
    rng: Option<Mutex<ChaCha20Rng>>,
}

impl Kmm {
    fn load_or_setup(db: &Database, config: &HabConfig) -> Result<Self, BrokerError> {
        let stored = db.with(|conn| {
            conn.query_row("SELECT public_params, master_secret FROM kmm_params WHERE id = 1", [], |row| {
                Ok((row.get::<_, Vec<u8>>(0)?, row.get::<_, Vec<u8>>(1)?))
            })
            .optional()
        })?;
        let rng = config
            .test_seed
            .map(|s| Mutex::new(ChaCha20Rng::seed_from_u64(s.wrapping_add(0x6b6d6d))));
        if let Some((pp, msk)) = stored {
            return Ok(Self {
                pp: PublicParams::from_bytes(&pp)?,
                msk: MasterSecret::from_bytes(&msk)?,
                rng,
            });
        }
        let (pp, msk) = match config.test_seed {
            Some(seed) => abe::setup_seeded(config.security_level, seed)?,
            None => abe::setup(config.security_level)?,
        };
        db.with(|conn| {
            conn.execute(
                "INSERT INTO kmm_params (id, public_params, master_secret) VALUES (1, ?1, ?2)",
                params![pp.to_bytes(), msk.to_bytes()],
            )
        })?;
        Ok(Self { pp, msk, rng })
    }

    fn issue(&self, attrs: &AttributeSet) -> Result<UserKey, AbeError> {
        match &self.rng {
            Some(rng) => abe::keygen_with_rng(&self.msk, attrs, &mut *rng.lock()),
            None => abe::keygen(&self.msk, attrs),
        }
    }
}

/// The Health Access Broker service core.
pub struct Hab {
    config: HabConfig,
    db: Database,
    access: AccessControl,
    mcp: MultiCloudProxy,
    gatekeeper: Arc<Gatekeeper>,
    broker_log: Arc<BrokerLog>,
    alerts: AlertStore,
    kmm: Kmm,
    aia_key: VerifyingKey,
    patient_locks: Mutex<HashMap<UserId, Arc<Mutex<()>>>>,
    failpoint: Mutex<Option<Failpoint>>,
}

impl std::fmt::Debug for Hab {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Hab")
            .field("brokers", &self.config.broker_count)
            .field("clouds", &self.mcp.cloud_ids())
            .finish_non_exhaustive()
    }
}

impl Hab {
    /// Assembles a broker over existing stores. The Gatekeeper must have a
    /// namespace for every broker partition.
    pub fn open(
        config: HabConfig,
        db: Database,
        gatekeeper: Arc<Gatekeeper>,
        broker_log: Arc<BrokerLog>,
        aia_key: VerifyingKey,
    ) -> Result<Self, BrokerError> {
        if config.broker_count == 0 {
            return Err(BrokerError::InvalidInput("broker count must be at least 1".into()));
        }
        let namespaces = gatekeeper.namespaces();
        if let Some(missing) = (0..config.broker_count).map(BrokerId).find(|b| !namespaces.contains(b)) {
            return Err(BrokerError::InvalidInput(format!("no gatekeeper namespace for {missing}")));
        }
        let kmm = Kmm::load_or_setup(&db, &config)?;
        Ok(Self {
            access: AccessControl::open(db.clone(), config.access.clone())?,
            mcp: MultiCloudProxy::new(db.clone()),
            alerts: AlertStore::new(db.clone()),
            config,
            db,
            gatekeeper,
            broker_log,
            kmm,
            aia_key,
            patient_locks: Mutex::new(HashMap::new()),
            failpoint: Mutex::new(None),
        })
    }

    /// Everything in memory; for tests, examples and benchmarks.
    pub fn in_memory(config: HabConfig, aia_key: VerifyingKey) -> Result<Self, BrokerError> {
        let gatekeeper = Arc::new(Gatekeeper::in_memory(config.broker_count));
        Self::open(
            config,
            Database::in_memory()?,
            gatekeeper,
            Arc::new(BrokerLog::in_memory()),
            aia_key,
        )
    }

    pub fn config(&self) -> &HabConfig {
        &self.config
    }

    pub fn public_params(&self) -> &PublicParams {
        &self.kmm.pp
    }

    pub fn access(&self) -> &AccessControl {
        &self.access
    }

    pub fn mcp(&self) -> &MultiCloudProxy {
        &self.mcp
    }

    pub fn gatekeeper(&self) -> &Arc<Gatekeeper> {
        &self.gatekeeper
    }

    pub fn broker_log(&self) -> &Arc<BrokerLog> {
        &self.broker_log
    }

    pub fn alert_store(&self) -> &AlertStore {
        &self.alerts
    }

    pub fn database(&self) -> &Database {
        &self.db
    }

    /// A fresh inspector over this broker's logs and alert queues.
    pub fn inspector(&self) -> Result<Inspector, BrokerError> {
        Ok(Inspector::new(
            self.gatekeeper.clone(),
            self.broker_log.clone(),
            self.config.rules.clone(),
            self.alerts.clone(),
            self.db.clone(),
        )?)
    }

    pub fn set_failpoint(&self, failpoint: Option<Failpoint>) {
        *self.failpoint.lock() = failpoint;
    }

    pub fn broker_for(&self, user: &UserId) -> BrokerId {
        broker_for(user, self.config.broker_count)
    }

    fn patient_lock(&self, patient: &UserId) -> Arc<Mutex<()>> {
        self.patient_locks.lock().entry(patient.clone()).or_default().clone()
    }

    fn log(
        &self,
        broker: BrokerId,
        module: Module,
        action: &str,
        params: BTreeMap<String, String>,
    ) -> Result<u64, BrokerError> {
        Ok(self.broker_log.append(broker, module, action, params)?.seq)
    }

    /// Records the request, then validates the session. Rejected sessions
    /// are recorded under [`ANONYMOUS`].
    fn begin(
        &self,
        token: &str,
        kind: RequestKind,
        mut params: BTreeMap<String, String>,
    ) -> Result<(Session, String), BrokerError> {
        match self.access.validate_session(token) {
            Ok(session) => {
                let seq = self.gatekeeper.record(session.broker_id, &session.user_id, kind, params)?;
                Ok((session, seq.to_string()))
            }
            Err(e) => {
                params.insert("rejected".into(), e.to_string());
                self.gatekeeper
                    .record(BrokerId(0), &UserId(ANONYMOUS.into()), kind, params)?;
                Err(BrokerError::Unauthorized(e))
            }
        }
    }

    /// Verifies an AIA grant, creates the credential and issues a key.
    pub fn register(&self, grant: &AttributeGrant, password: &str) -> Result<Registration, BrokerError> {
        let user_id = UserId::for_username(&grant.username);
        let broker = self.broker_for(&user_id);
        let request = self
            .gatekeeper
            .record(
                broker,
                &user_id,
                RequestKind::Register,
                kv([("username", grant.username.clone()), ("kind", grant.kind.as_str().into())]),
            )?
            .to_string();
        let mut granted = verify_grant(&self.aia_key, grant)?;
        if self.access.credential(&user_id).is_some() {
            return Err(AccessError::UsernameTaken.into());
        }
        // Identity attributes are added here, never taken from the grant.
        // Patients and their trusted contacts can open review payloads.
        match (grant.kind, &grant.acting_for) {
            (UserKind::Patient, _) => granted.push(patient_attribute(&user_id)),
            (UserKind::TrustedContact, Some(patient)) => match self.access.credential(patient) {
                Some(c) if c.kind == UserKind::Patient => granted.push(patient_attribute(patient)),
                _ => return Err(BrokerError::NotFound(format!("patient {patient}"))),
            },
            (UserKind::TrustedContact, None) => {
                return Err(BrokerError::InvalidInput("a trusted contact must act for a patient".into()))
            }
            _ => {}
        }
        let attributes = AttributeSet::new(granted).map_err(GrantError::from)?;
        self.log(
            broker,
            Module::Aacm,
            "register",
            kv([
                ("request", request.clone()),
                ("user", user_id.to_string()),
                ("kind", grant.kind.as_str().into()),
                ("broker", broker.0.to_string()),
            ]),
        )?;
        let cred = self.access.create_credential(
            &grant.username,
            password,
            grant.kind,
            attributes.clone(),
            broker,
            grant.acting_for.clone(),
        )?;
        let key = self.kmm.issue(&attributes)?;
        self.log(
            broker,
            Module::Kmm,
            "issue_key",
            kv([
                ("request", request),
                ("user", user_id.to_string()),
                ("key_id", key.key_id().to_string()),
                ("attributes", attributes.to_string()),
            ]),
        )?;
        Ok(Registration {
            user_id: cred.user_id,
            broker_id: broker,
            kind: cred.kind,
            attributes,
            key,
        })
    }

    pub fn login(&self, username: &str, password: &str) -> Result<Session, BrokerError> {
        let user_id = UserId::for_username(username);
        let broker = self.broker_for(&user_id);
        let request = self
            .gatekeeper
            .record(broker, &user_id, RequestKind::Login, kv([("username", username.to_string())]))?
            .to_string();
        let result = self.access.authenticate(username, password);
        let outcome = match &result {
            Ok(_) => "ok",
            Err(AccessError::AccountLocked { .. }) => "locked",
            Err(_) => "rejected",
        };
        self.log(
            broker,
            Module::Aacm,
            "authenticate",
            kv([
                ("request", request),
                ("user", user_id.to_string()),
                ("outcome", outcome.into()),
            ]),
        )?;
        Ok(result?)
    }

    /// Queues a data provider's submission for the patient. Nothing is
    /// stored until the patient approves.
    pub fn submit_upload(
        &self,
        token: &str,
        patient: &UserId,
        payload: Vec<u8>,
        target_file: Option<FileId>,
    ) -> Result<ReviewItem, BrokerError> {
        let mut gk_params = kv([("patient", patient.to_string())]);
        if let Some(f) = target_file {
            gk_params.insert("target_file".into(), f.to_string());
        }
        let (session, request) = self.begin(token, RequestKind::SubmitUpload, gk_params)?;
        if !matches!(session.kind, UserKind::DataProvider | UserKind::Hospital) {
            return Err(BrokerError::Forbidden("only data providers submit records".into()));
        }
        match self.access.credential(patient) {
            Some(c) if c.kind == UserKind::Patient => {}
            _ => return Err(BrokerError::NotFound(format!("patient {patient}"))),
        }
        if let Some(f) = target_file {
            if self.file_meta(f)?.is_none_or(|m| &m.patient != patient) {
                return Err(BrokerError::NotFound(format!("file {f}")));
            }
        }
        if payload.is_empty() {
            return Err(BrokerError::InvalidInput("empty payload".into()));
        }
        let item = ReviewItem {
            review_id: ReviewId::random(),
            provider: session.user_id.clone(),
            patient: patient.clone(),
            payload,
            status: ReviewStatus::Pending,
            submitted_at: Utc::now(),
            decided_at: None,
            target_file,
        };
        let mut bl = kv([
            ("request", request),
            ("provider", session.user_id.to_string()),
            ("patient", patient.to_string()),
            ("review_id", item.review_id.to_string()),
        ]);
        if let Some(f) = target_file {
            bl.insert("target_file".into(), f.to_string());
        }
        self.log(session.broker_id, Module::Dmm, "queue_review", bl)?;
        self.db.with(|conn| {
            conn.execute(
                "INSERT INTO reviews (review_id, provider, patient, payload, status, submitted_at, target_file)
                 VALUES (?1, ?2, ?3, ?4, 'pending', ?5, ?6)",
                params![
                    item.review_id.to_string(),
                    item.provider.as_str(),
                    item.patient.as_str(),
                    item.payload,
                    item.submitted_at.to_rfc3339_opts(chrono::SecondsFormat::Millis, true),
                    target_file.map(|f| f.to_string())
                ],
            )
        })?;
        Ok(item)
    }

    fn review(&self, review_id: ReviewId) -> Result<Option<ReviewItem>, BrokerError> {
        Ok(self
            .reviews_where("review_id = ?1", &review_id.to_string())?
            .into_iter()
            .next())
    }

    fn reviews_where(&self, clause: &str, arg: &str) -> Result<Vec<ReviewItem>, BrokerError> {
        let sql = format!(
            "SELECT review_id, provider, patient, payload, status, submitted_at, decided_at, target_file
             FROM reviews WHERE {clause} ORDER BY submitted_at, review_id"
        );
        let rows = self.db.with(|conn| {
            let mut stmt = conn.prepare(&sql)?;
            let rows = stmt.query_map([arg], |row| {
                Ok((
                    row.get::<_, String>(0)?,
                    row.get::<_, String>(1)?,
                    row.get::<_, String>(2)?,
                    row.get::<_, Vec<u8>>(3)?,
                    row.get::<_, String>(4)?,
                    row.get::<_, String>(5)?,
                    row.get::<_, Option<String>>(6)?,
                    row.get::<_, Option<String>>(7)?,
                ))
            })?;
            rows.collect::<Result<Vec<_>, _>>()
        })?;
        Ok(rows
            .into_iter()
            .filter_map(|(id, provider, patient, payload, status, submitted, decided, target)| {
                Some(ReviewItem {
                    review_id: id.parse().ok()?,
                    provider: UserId(provider),
                    patient: UserId(patient),
                    payload,
                    status: ReviewStatus::parse(&status),
                    submitted_at: parse_time(&submitted),
                    decided_at: decided.as_deref().map(parse_time),
                    target_file: target.and_then(|t| t.parse().ok()),
                })
            })
            .collect())
    }

    /// Pending review items and open access requests for the caller's
    /// patient account.
    pub fn list_reviews(&self, token: &str) -> Result<(Vec<ReviewItem>, Vec<AccessRequest>), BrokerError> {
        let (session, _) = self.begin(token, RequestKind::ListReviews, BTreeMap::new())?;
        let patient = session
            .principal()
            .cloned()
            .ok_or_else(|| BrokerError::Forbidden("only patients have a review queue".into()))?;
        let reviews = self
            .reviews_where("patient = ?1", patient.as_str())?
            .into_iter()
            .filter(|r| r.status == ReviewStatus::Pending)
            .collect();
        Ok((reviews, self.access_requests_for(&patient)?))
    }

    pub fn pending_reviews(&self, patient: &UserId) -> Result<Vec<ReviewItem>, BrokerError> {
        Ok(self
            .reviews_where("patient = ?1", patient.as_str())?
            .into_iter()
            .filter(|r| r.status == ReviewStatus::Pending)
            .collect())
    }

    pub fn file_meta(&self, file_id: FileId) -> Result<Option<FileMeta>, BrokerError> {
        let row = self.db.with(|conn| {
            conn.query_row(
                "SELECT patient, doc_id, blob_id, threshold, total, clouds, emergency, version, created_at, updated_at
                 FROM files WHERE file_id = ?1",
                [file_id.to_string()],
                |row| {
                    Ok((
                        row.get::<_, String>(0)?,
                        row.get::<_, String>(1)?,
                        row.get::<_, String>(2)?,
                        row.get::<_, usize>(3)?,
                        row.get::<_, usize>(4)?,
                        row.get::<_, String>(5)?,
                        row.get::<_, bool>(6)?,
                        row.get::<_, u32>(7)?,
                        row.get::<_, String>(8)?,
                        row.get::<_, String>(9)?,
                    ))
                },
            )
            .optional()
        })?;
        let Some((patient, doc, blob, t, n, clouds, emergency, version, created, updated)) = row else {
            return Ok(None);
        };
        let corrupt = |what: &str| BrokerError::InvalidInput(format!("stored file record has a bad {what}"));
        Ok(Some(FileMeta {
            file_id,
            patient: UserId(patient),
            doc_id: doc.parse().map_err(|_| corrupt("doc id"))?,
            blob_id: blob.parse().map_err(|_| corrupt("blob id"))?,
            threshold: t,
            total: n,
            clouds: serde_json::from_str(&clouds).map_err(|_| corrupt("cloud list"))?,
            emergency,
            version,
            created_at: parse_time(&created),
            updated_at: parse_time(&updated),
        }))
    }

    /// Patient decision on a review item. On approval the patient-encrypted
    /// document is split, uploaded and indexed, and the policy stored; a
    /// failure at any step leaves no visible file version.
    pub fn decide(
        &self,
        token: &str,
        review_id: ReviewId,
        decision: ReviewDecision,
    ) -> Result<DecisionOutcome, BrokerError> {
        let label = match decision {
            ReviewDecision::Approve(_) => "approve",
            ReviewDecision::Reject => "reject",
        };
        let (session, request) = self.begin(
            token,
            RequestKind::Approve,
            kv([("review_id", review_id.to_string()), ("decision", label.into())]),
        )?;
        let item = self
            .review(review_id)?
            .ok_or_else(|| BrokerError::NotFound(format!("review {review_id}")))?;
        if session.principal() != Some(&item.patient) {
            return Err(BrokerError::NotOwner);
        }
        let lock = self.patient_lock(&item.patient);
        let _guard = lock.lock();
        // Re-read under the lock so two concurrent decisions cannot both
        // see a pending item.
        let item = self.review(review_id)?.expect("review rows are never deleted");
        if item.status != ReviewStatus::Pending {
            return Err(BrokerError::ReviewClosed(review_id));
        }

        let approval = match decision {
            ReviewDecision::Reject => {
                self.log_decision(&session, &request, &item, label)?;
                let now = now_text();
                self.db.with(|conn| {
                    conn.execute(
                        "UPDATE reviews SET status = 'rejected', decided_at = ?2 WHERE review_id = ?1 AND status = 'pending'",
                        params![review_id.to_string(), now],
                    )
                })?;
                let mut closed = item;
                closed.status = ReviewStatus::Rejected;
                closed.decided_at = Some(parse_time(&now));
                return Ok(DecisionOutcome::Rejected(closed));
            }
            ReviewDecision::Approve(a) => a,
        };
        let doc = self.validate_approval(&approval)?;
        self.log_decision(&session, &request, &item, label)?;
        let meta = self.store_version(
            &session,
            &request,
            &item.patient,
            item.target_file,
            Some(review_id),
            &approval,
            &doc,
        )?;
        Ok(DecisionOutcome::Approved(meta))
    }

    fn log_decision(&self, session: &Session, request: &str, item: &ReviewItem, decision: &str) -> Result<(), BrokerError> {
        self.log(
            session.broker_id,
            Module::Dmm,
            "review_decision",
            kv([
                ("request", request.to_string()),
                ("actor", session.user_id.to_string()),
                ("patient", item.patient.to_string()),
                ("review_id", item.review_id.to_string()),
                ("decision", decision.into()),
            ]),
        )?;
        Ok(())
    }

    fn validate_approval(&self, approval: &Approval) -> Result<EncryptedDocument, BrokerError> {
        let doc = EncryptedDocument::from_bytes(&approval.document)
            .map_err(|e| BrokerError::InvalidInput(format!("document: {e}")))?;
        if doc.policy.to_string() != approval.policy.to_string() {
            return Err(BrokerError::InvalidInput(
                "document is not encrypted under the submitted policy".into(),
            ));
        }
        let n = approval.clouds.len();
        if n == 0 || approval.threshold == 0 || approval.threshold > n {
            return Err(BrokerError::InvalidInput(format!(
                "threshold {} invalid for {n} clouds",
                approval.threshold
            )));
        }
        let registered = self.mcp.cloud_ids();
        if let Some(c) = approval.clouds.iter().find(|c| !registered.contains(c)) {
            return Err(StorageError::UnknownCloud(c.clone()).into());
        }
        Ok(doc)
    }

    /// Splits and uploads a new version, then commits policy, file record
    /// and review status in one transaction. The previous version's shares
    /// are deleted only after the commit.
    #[allow(clippy::too_many_arguments)]
    fn store_version(
        &self,
        session: &Session,
        request: &str,
        patient: &UserId,
        target: Option<FileId>,
        review_id: Option<ReviewId>,
        approval: &Approval,
        doc: &EncryptedDocument,
    ) -> Result<FileMeta, BrokerError> {
        let previous = match target {
            Some(f) => Some(self.file_meta(f)?.ok_or_else(|| BrokerError::NotFound(format!("file {f}")))?),
            None => None,
        };
        let file_id = target.unwrap_or_else(FileId::random);
        let blob_id = BlobId::random();
        let n = approval.clouds.len();
        let shares = sharing::split(blob_id, &approval.document, n, approval.threshold)?;
        let review_param = review_id.map(|r| r.to_string()).unwrap_or_default();
        let mut store_params = kv([
            ("request", request.to_string()),
            ("file_id", file_id.to_string()),
            ("blob_id", blob_id.to_string()),
            ("patient", patient.to_string()),
            ("threshold", approval.threshold.to_string()),
            (
                "clouds",
                approval.clouds.iter().map(CloudId::as_str).collect::<Vec<_>>().join(","),
            ),
        ]);
        if review_id.is_some() {
            store_params.insert("review_id".into(), review_param.clone());
        }
        self.log(session.broker_id, Module::Mcp, "store", store_params)?;
        self.mcp.upload_shares(blob_id, &shares, &approval.clouds)?;

        if *self.failpoint.lock() == Some(Failpoint::AfterShareUpload) {
            return Err(BrokerError::InjectedFault("crash after share upload"));
        }

        let mut policy_params = kv([
            ("request", request.to_string()),
            ("file_id", file_id.to_string()),
            ("patient", patient.to_string()),
            ("actor", session.user_id.to_string()),
            ("policy", approval.policy.to_string()),
        ]);
        if review_id.is_some() {
            policy_params.insert("review_id".into(), review_param.clone());
        }
        let committed = self
            .log(session.broker_id, Module::Aacm, "store_policy", policy_params)
            .and_then(|_| self.commit_version(patient, file_id, blob_id, review_id, approval, doc, previous.as_ref()));
        let (meta, record) = match committed {
            Ok(v) => v,
            Err(e) => {
                let _ = self.mcp.delete_file(blob_id);
                return Err(e);
            }
        };
        self.access_cache(record);

        if let Some(old) = previous {
            let mut delete_params = kv([
                ("request", request.to_string()),
                ("file_id", file_id.to_string()),
                ("blob_id", old.blob_id.to_string()),
                ("patient", patient.to_string()),
            ]);
            if review_id.is_some() {
                delete_params.insert("review_id".into(), review_param);
            }
            self.log(session.broker_id, Module::Mcp, "delete", delete_params)?;
            match self.mcp.delete_file(old.blob_id) {
                Ok(_) | Err(StorageError::NotFound(_)) => {}
                Err(e) => tracing::warn!(error = %e, blob = %old.blob_id, "old version cleanup failed"),
            }
        }
        Ok(meta)
    }

    fn access_cache(&self, record: PolicyRecord) {
        self.access.cache_policy(record);
    }

    #[allow(clippy::too_many_arguments)]
    fn commit_version(
        &self,
        patient: &UserId,
        file_id: FileId,
        blob_id: BlobId,
        review_id: Option<ReviewId>,
        approval: &Approval,
        doc: &EncryptedDocument,
        previous: Option<&FileMeta>,
    ) -> Result<(FileMeta, PolicyRecord), BrokerError> {
        let now = now_text();
        let version = previous.map_or(1, |p| p.version + 1);
        let created = previous.map_or_else(|| now.clone(), |p| {
            p.created_at.to_rfc3339_opts(chrono::SecondsFormat::Millis, true)
        });
        let clouds_json = serde_json::to_string(&approval.clouds).expect("cloud ids serialize");
        let record = self.db.transaction(|tx| {
            let record = self
                .access
                .write_policy(tx, patient, file_id, &approval.policy)
                .map_err(BrokerError::from)?;
            tx.execute(
                "INSERT INTO files (file_id, patient, doc_id, blob_id, threshold, total, clouds, emergency, version, created_at, updated_at)
                 VALUES (?1, ?2, ?3, ?4, ?5, ?6, ?7, ?8, ?9, ?10, ?11)
                 ON CONFLICT(file_id) DO UPDATE SET doc_id = excluded.doc_id, blob_id = excluded.blob_id,
                   threshold = excluded.threshold, total = excluded.total, clouds = excluded.clouds,
                   emergency = excluded.emergency, version = excluded.version, updated_at = excluded.updated_at",
                params![
                    file_id.to_string(),
                    patient.as_str(),
                    doc.doc_id.to_string(),
                    blob_id.to_string(),
                    approval.threshold,
                    approval.clouds.len(),
                    clouds_json,
                    doc.emergency_dek.is_some(),
                    version,
                    created,
                    now
                ],
            )?;
            if let Some(r) = review_id {
                let n = tx.execute(
                    "UPDATE reviews SET status = 'approved', decided_at = ?2, target_file = ?3
                     WHERE review_id = ?1 AND status = 'pending'",
                    params![r.to_string(), now, file_id.to_string()],
                )?;
                if n != 1 {
                    return Err(BrokerError::ReviewClosed(r));
                }
            }
            Ok(record)
        })?;
        let meta = FileMeta {
            file_id,
            patient: patient.clone(),
            doc_id: doc.doc_id,
            blob_id,
            threshold: approval.threshold,
            total: approval.clouds.len(),
            clouds: approval.clouds.clone(),
            emergency: doc.emergency_dek.is_some(),
            version,
            created_at: parse_time(&created),
            updated_at: parse_time(&now),
        };
        Ok((meta, record))
    }

    /// Mediated retrieval. The access check runs, and is logged, before any
    /// share is fetched. The caller decrypts the returned document locally.
    pub fn retrieve(&self, token: &str, file_id: FileId) -> Result<EncryptedDocument, BrokerError> {
        let (session, request) = self.begin(token, RequestKind::Retrieve, kv([("file_id", file_id.to_string())]))?;
        let meta = self.file_meta(file_id)?;
        let decision = match (&meta, self.access.check_access(&session.user_id, file_id)) {
            (Some(_), Ok(d)) => d,
            (None, _) | (_, Err(AccessError::UnknownFile(_))) => {
                self.log_check(&session, &request, file_id, None, "deny", "unknown-file")?;
                return Err(BrokerError::NotFound(format!("file {file_id}")));
            }
            (_, Err(e)) => return Err(e.into()),
        };
        let meta = meta.expect("checked above");
        match decision {
            Decision::Allow => {
                self.log_check(&session, &request, file_id, Some(&meta.patient), "allow", "")?;
            }
            Decision::Deny(reason) => {
                self.log_check(&session, &request, file_id, Some(&meta.patient), "deny", reason.code())?;
                let access_request = if reason == DenyReason::PolicyNotSatisfied {
                    Some(self.queue_access_request(
                        &session,
                        &request,
                        &meta.patient,
                        file_id,
                        "automatic request after a denied retrieval",
                    )?)
                } else {
                    None
                };
                return Err(BrokerError::AccessDenied { reason, access_request });
            }
        }
        self.log(
            session.broker_id,
            Module::Mcp,
            "retrieve",
            kv([
                ("request", request),
                ("file_id", file_id.to_string()),
                ("blob_id", meta.blob_id.to_string()),
                ("patient", meta.patient.to_string()),
            ]),
        )?;
        let bytes = self.mcp.retrieve_file(meta.blob_id, meta.threshold)?;
        Ok(EncryptedDocument::from_bytes(&bytes)?)
    }

    fn log_check(
        &self,
        session: &Session,
        request: &str,
        file_id: FileId,
        patient: Option<&UserId>,
        decision: &str,
        reason: &str,
    ) -> Result<(), BrokerError> {
        let mut p = kv([
            ("request", request.to_string()),
            ("requestor", session.user_id.to_string()),
            ("file_id", file_id.to_string()),
            ("decision", decision.into()),
        ]);
        if let Some(pat) = patient {
            p.insert("patient".into(), pat.to_string());
        }
        if !reason.is_empty() {
            p.insert("reason".into(), reason.into());
        }
        self.log(session.broker_id, Module::Aacm, "check_access", p)?;
        Ok(())
    }

    fn queue_access_request(
        &self,
        session: &Session,
        request: &str,
        patient: &UserId,
        file_id: FileId,
        message: &str,
    ) -> Result<i64, BrokerError> {
        self.log(
            session.broker_id,
            Module::Dmm,
            "access_request",
            kv([
                ("request", request.to_string()),
                ("requestor", session.user_id.to_string()),
                ("patient", patient.to_string()),
                ("file_id", file_id.to_string()),
            ]),
        )?;
        Ok(self.db.with(|conn| {
            conn.execute(
                "INSERT INTO access_requests (requestor, patient, file_id, message, created_at) VALUES (?1, ?2, ?3, ?4, ?5)",
                params![session.user_id.as_str(), patient.as_str(), file_id.to_string(), message, now_text()],
            )?;
            Ok(conn.last_insert_rowid())
        })?)
    }

    /// A requestor asks the patient to widen a file's policy.
    pub fn request_access(&self, token: &str, file_id: FileId, message: &str) -> Result<AccessRequest, BrokerError> {
        let (session, request) =
            self.begin(token, RequestKind::AccessRequest, kv([("file_id", file_id.to_string())]))?;
        let meta = self
            .file_meta(file_id)?
            .ok_or_else(|| BrokerError::NotFound(format!("file {file_id}")))?;
        let id = self.queue_access_request(&session, &request, &meta.patient, file_id, message)?;
        Ok(AccessRequest {
            request_id: id,
            requestor: session.user_id,
            patient: meta.patient,
            file_id,
            message: message.to_string(),
            created_at: Utc::now(),
        })
    }

    pub fn access_requests_for(&self, patient: &UserId) -> Result<Vec<AccessRequest>, BrokerError> {
        let rows = self.db.with(|conn| {
            let mut stmt = conn.prepare(
                "SELECT request_id, requestor, file_id, message, created_at FROM access_requests
                 WHERE patient = ?1 ORDER BY request_id",
            )?;
            let rows = stmt.query_map([patient.as_str()], |row| {
                Ok((
                    row.get::<_, i64>(0)?,
                    row.get::<_, String>(1)?,
                    row.get::<_, String>(2)?,
                    row.get::<_, String>(3)?,
                    row.get::<_, String>(4)?,
                ))
            })?;
            rows.collect::<Result<Vec<_>, _>>()
        })?;
        Ok(rows
            .into_iter()
            .filter_map(|(id, requestor, file, message, at)| {
                Some(AccessRequest {
                    request_id: id,
                    requestor: UserId(requestor),
                    patient: patient.clone(),
                    file_id: file.parse().ok()?,
                    message,
                    created_at: parse_time(&at),
                })
            })
            .collect())
    }

    /// Replaces a file's policy. Without a document only the mediated
    /// check changes, which is enough to narrow access. To widen access the
    /// patient client re-encrypts under the new policy and passes the new
    /// document, which is stored as the next version.
    pub fn update_policy(
        &self,
        token: &str,
        file_id: FileId,
        policy: PolicyTree,
        reencrypted: Option<(Vec<u8>, Vec<CloudId>, usize)>,
    ) -> Result<PolicyRecord, BrokerError> {
        let (session, request) =
            self.begin(token, RequestKind::PolicyUpdate, kv([("file_id", file_id.to_string())]))?;
        let current = self
            .access
            .policy(file_id)
            .ok_or_else(|| BrokerError::NotFound(format!("file {file_id}")))?;
        if session.principal() != Some(&current.owner) {
            return Err(BrokerError::NotOwner);
        }
        let lock = self.patient_lock(&current.owner);
        let _guard = lock.lock();
        match reencrypted {
            None => {
                self.log(
                    session.broker_id,
                    Module::Aacm,
                    "store_policy",
                    kv([
                        ("request", request),
                        ("file_id", file_id.to_string()),
                        ("patient", current.owner.to_string()),
                        ("actor", session.user_id.to_string()),
                        ("policy", policy.to_string()),
                    ]),
                )?;
                Ok(self.access.store_policy(&session, file_id, policy)?)
            }
            Some((document, clouds, threshold)) => {
                let approval = Approval {
                    policy,
                    clouds,
                    threshold,
                    document,
                };
                let doc = self.validate_approval(&approval)?;
                self.store_version(&session, &request, &current.owner, Some(file_id), None, &approval, &doc)?;
                self.access
                    .policy(file_id)
                    .ok_or_else(|| BrokerError::NotFound(format!("file {file_id}")))
            }
        }
    }

    /// Adds or removes a revocation. Takes effect for the next retrieval;
    /// no ciphertext or key changes.
    pub fn set_revocation(
        &self,
        token: &str,
        subject: RevocationSubject,
        scope: RevocationScope,
        revoked: bool,
    ) -> Result<RevocationState, BrokerError> {
        let (subject_kind, subject_value) = match &subject {
            RevocationSubject::User(u) => ("user", u.to_string()),
            RevocationSubject::Attribute(a) => ("attribute", a.to_string()),
        };
        let scope_text = match &scope {
            RevocationScope::Global => "global".to_string(),
            RevocationScope::File(f) => f.to_string(),
        };
        let action = if revoked { "revoke" } else { "unrevoke" };
        let (session, request) = self.begin(
            token,
            RequestKind::Revoke,
            kv([
                ("subject_kind", subject_kind.into()),
                ("subject", subject_value.clone()),
                ("scope", scope_text.clone()),
                ("action", action.into()),
            ]),
        )?;
        let patient = session.principal().cloned().ok_or(BrokerError::NotOwner)?;
        if let RevocationScope::File(f) = &scope {
            match self.access.policy(*f) {
                None => return Err(BrokerError::NotFound(format!("file {f}"))),
                Some(r) if r.owner != patient => return Err(BrokerError::NotOwner),
                Some(_) => {}
            }
        }
        let lock = self.patient_lock(&patient);
        let _guard = lock.lock();
        self.log(
            session.broker_id,
            Module::Aacm,
            "revoke",
            kv([
                ("request", request),
                ("actor", session.user_id.to_string()),
                ("patient", patient.to_string()),
                ("subject_kind", subject_kind.into()),
                ("subject", subject_value),
                ("scope", scope_text),
                ("action", action.into()),
            ]),
        )?;
        Ok(self.access.set_revocation(&session, subject, scope, revoked)?)
    }

    pub fn revoke_user(&self, token: &str, user: &UserId, scope: RevocationScope) -> Result<RevocationState, BrokerError> {
        self.set_revocation(token, RevocationSubject::User(user.clone()), scope, true)
    }

    pub fn revoke_attribute(
        &self,
        token: &str,
        attribute: &Attribute,
        scope: RevocationScope,
    ) -> Result<RevocationState, BrokerError> {
        self.set_revocation(token, RevocationSubject::Attribute(attribute.clone()), scope, true)
    }

    /// Break-glass access for hospital emergency rooms. Bypasses the file's
    /// policy, never the logs: the release is flagged in the Brokers' Log
    /// and the patient is alerted.
    pub fn emergency_retrieve(
        &self,
        token: &str,
        patient: &UserId,
        file_id: FileId,
    ) -> Result<EmergencyBundle, BrokerError> {
        let (session, request) = self.begin(
            token,
            RequestKind::Emergency,
            kv([("patient", patient.to_string()), ("file_id", file_id.to_string())]),
        )?;
        let meta = self.file_meta(file_id)?.filter(|m| &m.patient == patient);
        let holds_attribute = self
            .access
            .credential(&session.user_id)
            .is_some_and(|c| c.attributes.contains_name(EMERGENCY_ATTRIBUTE));
        let refusal = if session.kind != UserKind::Hospital || !holds_attribute {
            Some("not-emergency-staff")
        } else if meta.is_none() {
            Some("unknown-file")
        } else if !meta.as_ref().is_some_and(|m| m.emergency) {
            Some("no-emergency-wrap")
        } else {
            None
        };
        let mut check = kv([
            ("request", request.clone()),
            ("requestor", session.user_id.to_string()),
            ("file_id", file_id.to_string()),
            ("patient", patient.to_string()),
            ("emergency", "true".into()),
            ("decision", if refusal.is_some() { "deny" } else { "allow" }.into()),
        ]);
        if let Some(r) = refusal {
            check.insert("reason".into(), r.into());
        }
        self.log(session.broker_id, Module::Aacm, "emergency_check", check)?;
        match refusal {
            Some("not-emergency-staff") => {
                return Err(BrokerError::Forbidden("emergency access is limited to hospital emergency staff".into()))
            }
            Some("unknown-file") => return Err(BrokerError::NotFound(format!("file {file_id}"))),
            Some(_) => return Err(BrokerError::Crypto(AbeError::NoEmergencyWrap)),
            None => {}
        }
        let meta = meta.expect("checked above");
        self.log(
            session.broker_id,
            Module::Mcp,
            "retrieve",
            kv([
                ("request", request.clone()),
                ("file_id", file_id.to_string()),
                ("blob_id", meta.blob_id.to_string()),
                ("patient", patient.to_string()),
                ("emergency", "true".into()),
            ]),
        )?;
        let bytes = self.mcp.retrieve_file(meta.blob_id, meta.threshold)?;
        let release = self.broker_log.append(
            session.broker_id,
            Module::Dmm,
            "emergency_release",
            kv([
                ("request", request.clone()),
                ("requestor", session.user_id.to_string()),
                ("file_id", file_id.to_string()),
                ("patient", patient.to_string()),
                ("emergency", "true".into()),
            ]),
        )?;
        self.alerts.raise(Finding {
            rule_id: "emergency-access".into(),
            kind: AlertKind::EmergencyAccess,
            severity: Severity::High,
            bl_seq: Some(release.seq),
            gk_seq: request.parse().ok(),
            locator: None,
            patient: Some(patient.clone()),
            description: format!("emergency access to file {file_id} by {}", session.user_id),
        })?;
        Ok(EmergencyBundle {
            patient: patient.clone(),
            file_id,
            document: bytes,
        })
    }

    /// Alerts addressed to the caller's patient account.
    pub fn alerts(&self, token: &str) -> Result<Vec<Alert>, BrokerError> {
        let (session, _) = self.begin(token, RequestKind::ListAlerts, BTreeMap::new())?;
        let recipient = session.principal().cloned().unwrap_or(session.user_id);
        Ok(self.alerts.for_recipient(recipient.as_str())?)
    }

    pub fn chain_status(&self, token: &str) -> Result<ChainStatus, BrokerError> {
        self.begin(token, RequestKind::ChainStatus, BTreeMap::new())?;
        Ok(self.broker_log.verify_all()?)
    }

    /// Deletes stored blobs that no committed file version references,
    /// such as those left by a crash during approval. Returns the number of
    /// blobs removed.
    pub fn reconcile(&self) -> Result<usize, BrokerError> {
        let referenced: std::collections::HashSet<String> = self.db.with(|conn| {
            let mut stmt = conn.prepare("SELECT blob_id FROM files")?;
            let rows = stmt.query_map([], |row| row.get::<_, String>(0))?;
            rows.collect()
        })?;
        let dangling: Vec<BlobId> = self
            .mcp
            .stored_files()?
            .into_iter()
            .filter(|b| !referenced.contains(&b.to_string()))
            .collect();
        if dangling.is_empty() {
            return Ok(0);
        }
        let system = UserId(SYSTEM.into());
        let request = self
            .gatekeeper
            .record(BrokerId(0), &system, RequestKind::Maintenance, kv([("task", "reconcile".into())]))?
            .to_string();
        for blob in &dangling {
            self.log(
                BrokerId(0),
                Module::Mcp,
                "delete",
                kv([
                    ("request", request.clone()),
                    ("blob_id", blob.to_string()),
                    ("reason", "dangling".into()),
                ]),
            )?;
            self.mcp.delete_file(*blob)?;
        }
        Ok(dangling.len())
    }
}
