//! HTTP+JSON front end. Handlers authenticate with `Authorization: Bearer`
//! session tokens and move binary payloads as base64 strings.

mod config;

use std::collections::BTreeMap;
use std::sync::Arc;
use std::time::Duration;

use axum::extract::{Path, State};
use axum::http::{HeaderMap, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::{Deserialize, Serialize};
use serde_json::json;
use thiserror::Error;

pub use config::{ApiConfig, ENV_DATABASE, ENV_LISTEN};

use crate::abe::{Attribute, PolicyTree};
use crate::access::{AccessConfig, AccessError, RevocationScope, RevocationSubject, UserKind};
use crate::audit::{BrokerLog, FileLogStore, Gatekeeper, Inspector, InspectorHandle, LogStore, RuleSet};
use crate::broker::aia::{parse_verifying_key, AttributeAuthority, AttributeGrant};
use crate::broker::{Approval, BrokerError, DecisionOutcome, Hab, HabConfig, ReviewDecision};
use crate::db::Database;
use crate::ids::{BrokerId, CloudId, FileId, ReviewId, UserId};
use crate::storage::StorageError;

#[derive(Debug, Error)]
pub enum ApiError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("startup failed: {0}")]
    Startup(String),
    #[error("cannot bind {addr}: {source}")]
    Bind {
        addr: std::net::SocketAddr,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Broker(#[from] BrokerError),
    #[error("bad request: {0}")]
    BadRequest(String),
    #[error("missing or malformed bearer token")]
    MissingToken,
    #[error("admin token required")]
    NotAdmin,
}

impl ApiError {
    fn status(&self) -> StatusCode {
        match self {
            ApiError::BadRequest(_) => StatusCode::BAD_REQUEST,
            ApiError::MissingToken => StatusCode::UNAUTHORIZED,
            ApiError::NotAdmin => StatusCode::FORBIDDEN,
            ApiError::Config(_) | ApiError::Startup(_) | ApiError::Bind { .. } => StatusCode::INTERNAL_SERVER_ERROR,
            ApiError::Broker(e) => match e {
                BrokerError::Unauthorized(_) => StatusCode::UNAUTHORIZED,
                BrokerError::Forbidden(_) | BrokerError::NotOwner | BrokerError::AccessDenied { .. } => {
                    StatusCode::FORBIDDEN
                }
                BrokerError::NotFound(_) => StatusCode::NOT_FOUND,
                BrokerError::InvalidGrant(_) | BrokerError::InvalidInput(_) | BrokerError::Sharing(_) => {
                    StatusCode::BAD_REQUEST
                }
                BrokerError::ReviewClosed(_) => StatusCode::CONFLICT,
                BrokerError::Access(a) => match a {
                    AccessError::UsernameTaken => StatusCode::CONFLICT,
                    AccessError::BadCredentials => StatusCode::UNAUTHORIZED,
                    AccessError::AccountLocked { .. } => StatusCode::TOO_MANY_REQUESTS,
                    AccessError::InvalidUsername(_) | AccessError::Policy(_) => StatusCode::BAD_REQUEST,
                    _ => StatusCode::INTERNAL_SERVER_ERROR,
                },
                BrokerError::Storage(StorageError::UnknownCloud(_) | StorageError::ShareCountMismatch { .. }) => {
                    StatusCode::BAD_REQUEST
                }
                BrokerError::Storage(StorageError::InsufficientLiveShares { .. }) | BrokerError::Audit(_) => {
                    StatusCode::SERVICE_UNAVAILABLE
                }
                BrokerError::Crypto(crate::abe::AbeError::NoEmergencyWrap) => StatusCode::CONFLICT,
                _ => StatusCode::INTERNAL_SERVER_ERROR,
            },
        }
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let status = self.status();
        let mut body = json!({ "error": self.to_string() });
        if let ApiError::Broker(BrokerError::AccessDenied { reason, access_request }) = &self {
            body["reason"] = json!(reason.code());
            body["access_request"] = json!(access_request);
        }
        if status.is_server_error() {
            tracing::error!(error = %self, "request failed");
        }
        (status, Json(body)).into_response()
    }
}

/// A configured broker plus its background inspector.
pub struct Service {
    hab: Arc<Hab>,
    config: ApiConfig,
    _inspector: Option<InspectorHandle>,
}

impl std::fmt::Debug for Service {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Service").field("hab", &self.hab).finish_non_exhaustive()
    }
}

impl Service {
    /// Opens stores, registers backends and starts the inspector.
    pub fn build(config: ApiConfig) -> Result<Self, ApiError> {
        config.validate()?;
        let startup = |e: &dyn std::fmt::Display| ApiError::Startup(e.to_string());
        let db = if config.in_memory_database() {
            Database::in_memory()
        } else {
            Database::open(&config.database)
        }
        .map_err(|e| startup(&e))?;

        let (gatekeeper, broker_log) = match config.resolved_log_dir() {
            None => (Gatekeeper::in_memory(config.broker_count), BrokerLog::in_memory()),
            Some(dir) => {
                let mut stores: BTreeMap<BrokerId, Arc<dyn LogStore>> = BTreeMap::new();
                for b in 0..config.broker_count {
                    let store = FileLogStore::open(dir.join(format!("gatekeeper-broker-{b}.ndjson")))
                        .map_err(|e| startup(&e))?;
                    stores.insert(BrokerId(b), Arc::new(store));
                }
                let bl = FileLogStore::open(dir.join("brokers-log.ndjson")).map_err(|e| startup(&e))?;
                (
                    Gatekeeper::new(stores).map_err(|e| startup(&e))?,
                    BrokerLog::open(Arc::new(bl)).map_err(|e| startup(&e))?,
                )
            }
        };

        let rules = match &config.rules {
            Some(path) => RuleSet::load(path).map_err(|e| startup(&e))?,
            None => RuleSet::default_rules(),
        }
        .with_window(config.pairing_window_secs);

        let aia_key = match (&config.aia_public_key, config.aia_dev_seed) {
            (Some(hex_key), _) => parse_verifying_key(hex_key).map_err(|e| ApiError::Config(e.to_string()))?,
            (None, Some(seed)) => dev_authority(seed).verifying_key(),
            (None, None) => unreachable!("validated"),
        };

        let hab_config = HabConfig {
            broker_count: config.broker_count,
            default_threshold: config.threshold,
            test_seed: config.test_seed,
            access: AccessConfig {
                attempt_limit: config.attempt_limit,
                base_lockout: Duration::from_secs(config.lockout_secs),
                session_ttl: Duration::from_secs(config.session_ttl_secs),
            },
            rules,
            ..HabConfig::default()
        };
        let hab = Hab::open(hab_config, db, Arc::new(gatekeeper), Arc::new(broker_log), aia_key)?;
        for desc in &config.backends {
            hab.mcp().register_backend(desc).map_err(BrokerError::from)?;
        }
        let hab = Arc::new(hab);
        let inspector: Arc<Inspector> = Arc::new(hab.inspector()?);
        let handle = inspector.spawn(Duration::from_millis(config.inspector_interval_ms));
        Ok(Self {
            hab,
            config,
            _inspector: Some(handle),
        })
    }

    pub fn hab(&self) -> &Arc<Hab> {
        &self.hab
    }

    pub fn config(&self) -> &ApiConfig {
        &self.config
    }

    pub fn router(self: &Arc<Self>) -> Router {
        Router::new()
            .route("/register", post(register))
            .route("/login", post(login))
            .route("/uploads", post(submit_upload))
            .route("/reviews", get(list_reviews))
            .route("/reviews/{id}/decision", post(decide))
            .route("/files/{id}", get(retrieve))
            .route("/files/{id}/policy", post(update_policy))
            .route("/revocations", post(revoke))
            .route("/access-requests", post(access_request))
            .route("/emergency/{patient}/{file}", post(emergency))
            .route("/alerts", get(alerts))
            .route("/audit/chain-status", get(chain_status))
            .route("/health", get(health))
            .with_state(self.clone())
    }

    /// Binds the configured address and serves until `shutdown` resolves.
    pub async fn serve(
        self: Arc<Self>,
        shutdown: impl std::future::Future<Output = ()> + Send + 'static,
    ) -> Result<(), ApiError> {
        let addr = self.config.listen;
        let listener = tokio::net::TcpListener::bind(addr)
            .await
            .map_err(|source| ApiError::Bind { addr, source })?;
        self.serve_on(listener, shutdown).await
    }

    pub async fn serve_on(
        self: Arc<Self>,
        listener: tokio::net::TcpListener,
        shutdown: impl std::future::Future<Output = ()> + Send + 'static,
    ) -> Result<(), ApiError> {
        tracing::info!(addr = ?listener.local_addr().ok(), "listening");
        axum::serve(listener, self.router())
            .with_graceful_shutdown(shutdown)
            .await
            .map_err(|e| ApiError::Startup(e.to_string()))
    }
}

/// Attribute authority derived from a development seed. The service and
/// local tooling use the same derivation so grants verify.
pub fn dev_authority(seed: u64) -> AttributeAuthority {
    AttributeAuthority::from_seed("dev-aia", seed)
}

type AppState = State<Arc<Service>>;

fn bearer(headers: &HeaderMap) -> Result<String, ApiError> {
    headers
        .get(axum::http::header::AUTHORIZATION)
        .and_then(|v| v.to_str().ok())
        .and_then(|v| v.strip_prefix("Bearer "))
        .map(|t| t.trim().to_string())
        .filter(|t| !t.is_empty())
        .ok_or(ApiError::MissingToken)
}

/// Runs blocking broker work off the async executor.
async fn blocking<T: Send + 'static>(
    f: impl FnOnce() -> Result<T, ApiError> + Send + 'static,
) -> Result<T, ApiError> {
    tokio::task::spawn_blocking(f)
        .await
        .map_err(|e| ApiError::Startup(format!("worker panicked: {e}")))?
}

fn decode(field: &str, text: &str) -> Result<Vec<u8>, ApiError> {
    crate::b64::decode(text).map_err(|e| ApiError::BadRequest(format!("{field}: {e}")))
}

fn parse_id<T: std::str::FromStr>(what: &str, text: &str) -> Result<T, ApiError> {
    text.parse().map_err(|_| ApiError::BadRequest(format!("malformed {what} {text:?}")))
}

#[derive(Debug, Serialize, Deserialize)]
pub struct RegisterRequest {
    pub grant: AttributeGrant,
    pub password: String,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct RegisterResponse {
    pub user_id: UserId,
    pub broker_id: BrokerId,
    pub kind: UserKind,
    pub attributes: Vec<String>,
    /// The caller's CP-ABE key. Delivered once; the service keeps no copy.
    pub key: String,
    pub public_params: String,
}

async fn register(State(svc): AppState, Json(req): Json<RegisterRequest>) -> Result<Json<RegisterResponse>, ApiError> {
    blocking(move || {
        let reg = svc.hab.register(&req.grant, &req.password)?;
        Ok(Json(RegisterResponse {
            user_id: reg.user_id,
            broker_id: reg.broker_id,
            kind: reg.kind,
            attributes: reg.attributes.names(),
            key: crate::b64::encode(&reg.key.to_bytes()),
            public_params: crate::b64::encode(&svc.hab.public_params().to_bytes()),
        }))
    })
    .await
}

#[derive(Debug, Serialize, Deserialize)]
pub struct LoginRequest {
    pub username: String,
    pub password: String,
}

async fn login(State(svc): AppState, Json(req): Json<LoginRequest>) -> Result<Response, ApiError> {
    blocking(move || {
        let session = svc.hab.login(&req.username, &req.password)?;
        Ok(Json(json!({
            "token": session.token,
            "user_id": session.user_id,
            "kind": session.kind,
            "broker_id": session.broker_id,
            "acting_for": session.acting_for,
            "expires_at": session.expires_at,
            "public_params": crate::b64::encode(&svc.hab.public_params().to_bytes()),
            "default_threshold": svc.config.threshold,
            "default_total": svc.config.total,
            "clouds": svc.hab.mcp().cloud_ids(),
        }))
        .into_response())
    })
    .await
}

#[derive(Debug, Serialize, Deserialize)]
pub struct UploadRequest {
    pub patient: UserId,
    /// Base64 payload, normally sealed for the patient.
    pub payload: String,
    #[serde(default)]
    pub target_file: Option<FileId>,
}

async fn submit_upload(
    State(svc): AppState,
    headers: HeaderMap,
    Json(req): Json<UploadRequest>,
) -> Result<Response, ApiError> {
    let token = bearer(&headers)?;
    let payload = decode("payload", &req.payload)?;
    blocking(move || {
        let item = svc.hab.submit_upload(&token, &req.patient, payload, req.target_file)?;
        Ok((StatusCode::CREATED, Json(item)).into_response())
    })
    .await
}

async fn list_reviews(State(svc): AppState, headers: HeaderMap) -> Result<Response, ApiError> {
    let token = bearer(&headers)?;
    blocking(move || {
        let (reviews, access_requests) = svc.hab.list_reviews(&token)?;
        Ok(Json(json!({ "reviews": reviews, "access_requests": access_requests })).into_response())
    })
    .await
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DecisionKind {
    Approve,
    Reject,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct DecisionRequest {
    pub decision: DecisionKind,
    #[serde(default)]
    pub policy: Option<PolicyTree>,
    #[serde(default)]
    pub clouds: Option<Vec<CloudId>>,
    #[serde(default)]
    pub threshold: Option<usize>,
    /// Base64 serialized encrypted document.
    #[serde(default)]
    pub document: Option<String>,
}

async fn decide(
    State(svc): AppState,
    headers: HeaderMap,
    Path(id): Path<String>,
    Json(req): Json<DecisionRequest>,
) -> Result<Response, ApiError> {
    let token = bearer(&headers)?;
    let review_id: ReviewId = parse_id("review id", &id)?;
    let decision = match req.decision {
        DecisionKind::Reject => ReviewDecision::Reject,
        DecisionKind::Approve => {
            let policy = req
                .policy
                .ok_or_else(|| ApiError::BadRequest("approval needs a policy".into()))?;
            let document = decode(
                "document",
                req.document
                    .as_deref()
                    .ok_or_else(|| ApiError::BadRequest("approval needs a document".into()))?,
            )?;
            let clouds = req.clouds.unwrap_or_else(|| {
                svc.hab.mcp().cloud_ids().into_iter().take(svc.config.total).collect()
            });
            ReviewDecision::Approve(Approval {
                policy,
                clouds,
                threshold: req.threshold.unwrap_or(svc.config.threshold),
                document,
            })
        }
    };
    blocking(move || {
        let body = match svc.hab.decide(&token, review_id, decision)? {
            DecisionOutcome::Approved(file) => json!({ "status": "approved", "file": file }),
            DecisionOutcome::Rejected(review) => json!({ "status": "rejected", "review": review }),
        };
        Ok(Json(body).into_response())
    })
    .await
}

async fn retrieve(State(svc): AppState, headers: HeaderMap, Path(id): Path<String>) -> Result<Response, ApiError> {
    let token = bearer(&headers)?;
    let file_id: FileId = parse_id("file id", &id)?;
    blocking(move || {
        let doc = svc.hab.retrieve(&token, file_id)?;
        Ok(Json(json!({
            "file_id": file_id,
            "policy": doc.policy,
            "document": crate::b64::encode(&doc.to_bytes()),
        }))
        .into_response())
    })
    .await
}

#[derive(Debug, Serialize, Deserialize)]
pub struct PolicyRequest {
    pub policy: PolicyTree,
    /// Base64 document re-encrypted under `policy`, required to widen.
    #[serde(default)]
    pub document: Option<String>,
    #[serde(default)]
    pub clouds: Option<Vec<CloudId>>,
    #[serde(default)]
    pub threshold: Option<usize>,
}

async fn update_policy(
    State(svc): AppState,
    headers: HeaderMap,
    Path(id): Path<String>,
    Json(req): Json<PolicyRequest>,
) -> Result<Response, ApiError> {
    let token = bearer(&headers)?;
    let file_id: FileId = parse_id("file id", &id)?;
    let reencrypted = match &req.document {
        None => None,
        Some(text) => {
            let document = decode("document", text)?;
            let current = svc.hab.file_meta(file_id)?;
            let clouds = req
                .clouds
                .clone()
                .or_else(|| current.as_ref().map(|m| m.clouds.clone()))
                .unwrap_or_default();
            let threshold = req
                .threshold
                .or(current.as_ref().map(|m| m.threshold))
                .unwrap_or(svc.config.threshold);
            Some((document, clouds, threshold))
        }
    };
    blocking(move || {
        let record = svc.hab.update_policy(&token, file_id, req.policy, reencrypted)?;
        Ok(Json(record).into_response())
    })
    .await
}

#[derive(Debug, Serialize, Deserialize)]
pub struct RevocationRequest {
    /// `user` or `attribute`.
    pub subject_kind: String,
    pub subject: String,
    /// `global` or a file id.
    pub scope: String,
    #[serde(default = "default_true")]
    pub revoked: bool,
}

fn default_true() -> bool {
    true
}

async fn revoke(
    State(svc): AppState,
    headers: HeaderMap,
    Json(req): Json<RevocationRequest>,
) -> Result<Response, ApiError> {
    let token = bearer(&headers)?;
    let subject = match req.subject_kind.as_str() {
        "user" => RevocationSubject::User(UserId(req.subject.clone())),
        "attribute" => RevocationSubject::Attribute(
            Attribute::new(&req.subject).map_err(|e| ApiError::BadRequest(e.to_string()))?,
        ),
        other => return Err(ApiError::BadRequest(format!("unknown subject kind {other:?}"))),
    };
    let scope = match req.scope.as_str() {
        "global" => RevocationScope::Global,
        file => RevocationScope::File(parse_id("file id", file)?),
    };
    blocking(move || {
        let state = svc.hab.set_revocation(&token, subject, scope, req.revoked)?;
        Ok(Json(state).into_response())
    })
    .await
}

#[derive(Debug, Serialize, Deserialize)]
pub struct AccessRequestBody {
    pub file_id: FileId,
    #[serde(default)]
    pub message: String,
}

async fn access_request(
    State(svc): AppState,
    headers: HeaderMap,
    Json(req): Json<AccessRequestBody>,
) -> Result<Response, ApiError> {
    let token = bearer(&headers)?;
    blocking(move || {
        let created = svc.hab.request_access(&token, req.file_id, &req.message)?;
        Ok((StatusCode::CREATED, Json(created)).into_response())
    })
    .await
}

async fn emergency(
    State(svc): AppState,
    headers: HeaderMap,
    Path((patient, file)): Path<(String, String)>,
) -> Result<Response, ApiError> {
    let token = bearer(&headers)?;
    let file_id: FileId = parse_id("file id", &file)?;
    blocking(move || {
        let bundle = svc.hab.emergency_retrieve(&token, &UserId(patient), file_id)?;
        Ok(Json(bundle).into_response())
    })
    .await
}

async fn alerts(State(svc): AppState, headers: HeaderMap) -> Result<Response, ApiError> {
    let token = bearer(&headers)?;
    blocking(move || {
        if svc.config.admin_token.as_deref() == Some(token.as_str()) {
            let all = svc.hab.alert_store().all().map_err(BrokerError::from)?;
            return Ok(Json(all).into_response());
        }
        Ok(Json(svc.hab.alerts(&token)?).into_response())
    })
    .await
}

async fn chain_status(State(svc): AppState, headers: HeaderMap) -> Result<Response, ApiError> {
    let token = bearer(&headers)?;
    blocking(move || {
        if svc.config.admin_token.as_deref() == Some(token.as_str()) {
            let status = svc.hab.broker_log().verify_all().map_err(BrokerError::from)?;
            return Ok(Json(status).into_response());
        }
        Ok(Json(svc.hab.chain_status(&token)?).into_response())
    })
    .await
}

async fn health(State(svc): AppState) -> Result<Response, ApiError> {
    blocking(move || {
        let clouds = svc.hab.mcp().health();
        let live = clouds.iter().filter(|c| c.healthy).count();
        let ready = live >= svc.config.threshold;
        let status = if ready { StatusCode::OK } else { StatusCode::SERVICE_UNAVAILABLE };
        Ok((
            status,
            Json(json!({
                "status": if ready { "ready" } else { "degraded" },
                "brokers": svc.config.broker_count,
                "clouds": clouds,
                "last_log_seq": svc.hab.broker_log().last_seq(),
            })),
        )
            .into_response())
    })
    .await
}
