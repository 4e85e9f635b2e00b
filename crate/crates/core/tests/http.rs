use std::sync::Arc;

use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine;
use hab::abe::{PolicyTree, PublicParams, UserKey};
use hab::access::UserKind;
use hab::api::{dev_authority, ApiConfig, Service};
use hab::client;
use hab::ids::UserId;
use reqwest::StatusCode;
use serde_json::{json, Value};

const SEED: u64 = 5;
const PW: &str = "hunter2-but-longer";

struct Running {
    base: String,
    svc: Arc<Service>,
    http: reqwest::Client,
    _stop: tokio::sync::oneshot::Sender<()>,
}

async fn start(config: ApiConfig) -> Running {
    let svc = Arc::new(Service::build(config).unwrap());
    let listener = tokio::net::TcpListener::bind("127.0.0.1:0").await.unwrap();
    let base = format!("http://{}", listener.local_addr().unwrap());
    let (tx, rx) = tokio::sync::oneshot::channel::<()>();
    tokio::spawn(svc.clone().serve_on(listener, async {
        let _ = rx.await;
    }));
    Running {
        base,
        svc,
        http: reqwest::Client::new(),
        _stop: tx,
    }
}

fn test_config() -> ApiConfig {
    ApiConfig {
        broker_count: 2,
        threshold: 3,
        total: 5,
        aia_dev_seed: Some(SEED),
        test_seed: Some(SEED),
        admin_token: Some("admin-secret".into()),
        inspector_interval_ms: 50,
        ..ApiConfig::default()
    }
}

struct Client {
    user_id: UserId,
    token: String,
    key: UserKey,
    pp: PublicParams,
}

impl Running {
    async fn post(&self, path: &str, token: Option<&str>, body: Value) -> (StatusCode, Value) {
        let mut req = self.http.post(format!("{}{path}", self.base)).json(&body);
        if let Some(t) = token {
            req = req.bearer_auth(t);
        }
        let resp = req.send().await.unwrap();
        let status = resp.status();
        (status, resp.json().await.unwrap_or(Value::Null))
    }

    async fn get(&self, path: &str, token: Option<&str>) -> (StatusCode, Value) {
        let mut req = self.http.get(format!("{}{path}", self.base));
        if let Some(t) = token {
            req = req.bearer_auth(t);
        }
        let resp = req.send().await.unwrap();
        let status = resp.status();
        (status, resp.json().await.unwrap_or(Value::Null))
    }

    async fn enroll(&self, username: &str, kind: UserKind, attrs: &[&str]) -> Client {
        let grant = dev_authority(SEED).issue_grant(username, kind, attrs, None);
        let (status, reg) = self.post("/register", None, json!({ "grant": grant, "password": PW })).await;
        assert_eq!(status, StatusCode::OK, "{reg}");
        let (status, login) = self
            .post("/login", None, json!({ "username": username, "password": PW }))
            .await;
        assert_eq!(status, StatusCode::OK, "{login}");
        Client {
            user_id: UserId(reg["user_id"].as_str().unwrap().into()),
            token: login["token"].as_str().unwrap().into(),
            key: UserKey::from_bytes(&B64.decode(reg["key"].as_str().unwrap()).unwrap()).unwrap(),
            pp: PublicParams::from_bytes(&B64.decode(login["public_params"].as_str().unwrap()).unwrap()).unwrap(),
        }
    }
}

fn intrusions(svc: &Service) -> usize {
    svc.hab().inspector().unwrap().poll().unwrap();
    svc.hab()
        .alert_store()
        .all()
        .unwrap()
        .iter()
        .filter(|a| a.is_intrusion())
        .count()
}

#[tokio::test(flavor = "multi_thread", worker_threads = 4)]
async fn health_reports_ready() {
    let s = start(test_config()).await;
    let (status, body) = s.get("/health", None).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(body["status"], "ready");
    assert_eq!(body["brokers"], 2);
    assert_eq!(body["clouds"].as_array().unwrap().len(), 5);
}

#[tokio::test(flavor = "multi_thread", worker_threads = 4)]
async fn scripted_workflow_over_http() {
    let s = start(test_config()).await;
    let alice = s.enroll("alice", UserKind::Patient, &[]).await;
    let lab = s.enroll("citylab", UserKind::DataProvider, &["lab"]).await;
    let doctor = s.enroll("drbob", UserKind::DataRequestor, &["doctor"]).await;
    let nurse = s.enroll("nurse", UserKind::DataRequestor, &["nurse"]).await;
    let er = s.enroll("er-desk", UserKind::Hospital, &["emergency_room"]).await;

    let record = b"<labresult>HbA1c 5.4%</labresult>";
    let sealed = client::seal_for_patient(&lab.pp, &alice.user_id, record).unwrap();
    let (status, item) = s
        .post(
            "/uploads",
            Some(&lab.token),
            json!({ "patient": alice.user_id, "payload": B64.encode(&sealed) }),
        )
        .await;
    assert_eq!(status, StatusCode::CREATED, "{item}");

    let (status, queue) = s.get("/reviews", Some(&alice.token)).await;
    assert_eq!(status, StatusCode::OK);
    let review = &queue["reviews"][0];
    let payload = B64.decode(review["payload"].as_str().unwrap()).unwrap();
    let opened = client::open_review_payload(&alice.key, &payload).unwrap();
    assert_eq!(opened, record);

    let policy = PolicyTree::parse("doctor OR cardiology").unwrap();
    let document = client::prepare_document(&alice.pp, &policy, &opened, true).unwrap();
    let (status, decided) = s
        .post(
            &format!("/reviews/{}/decision", review["review_id"].as_str().unwrap()),
            Some(&alice.token),
            json!({ "decision": "approve", "policy": "doctor OR cardiology", "threshold": 3,
                    "document": B64.encode(&document) }),
        )
        .await;
    assert_eq!(status, StatusCode::OK, "{decided}");
    let file_id = decided["file"]["file_id"].as_str().unwrap().to_string();

    let (status, got) = s.get(&format!("/files/{file_id}"), Some(&doctor.token)).await;
    assert_eq!(status, StatusCode::OK, "{got}");
    let bytes = B64.decode(got["document"].as_str().unwrap()).unwrap();
    assert_eq!(client::open_document(&doctor.key, &bytes).unwrap(), record);

    let (status, denied) = s.get(&format!("/files/{file_id}"), Some(&nurse.token)).await;
    assert_eq!(status, StatusCode::FORBIDDEN);
    assert_eq!(denied["reason"], "policy");
    assert!(denied["access_request"].is_number());

    let (status, _) = s
        .post("/access-requests", Some(&nurse.token), json!({ "file_id": file_id, "message": "on shift" }))
        .await;
    assert_eq!(status, StatusCode::CREATED);
    let (_, queue) = s.get("/reviews", Some(&alice.token)).await;
    assert_eq!(queue["access_requests"].as_array().unwrap().len(), 2);

    let (status, state) = s
        .post(
            "/revocations",
            Some(&alice.token),
            json!({ "subject_kind": "user", "subject": doctor.user_id, "scope": file_id }),
        )
        .await;
    assert_eq!(status, StatusCode::OK, "{state}");
    let (status, denied) = s.get(&format!("/files/{file_id}"), Some(&doctor.token)).await;
    assert_eq!(status, StatusCode::FORBIDDEN);
    assert_eq!(denied["reason"], "revoked");

    let (status, _) = s
        .post(
            &format!("/files/{file_id}/policy"),
            Some(&alice.token),
            json!({ "policy": "cardiology" }),
        )
        .await;
    assert_eq!(status, StatusCode::OK);

    let (status, bundle) = s
        .post(&format!("/emergency/{}/{file_id}", alice.user_id), Some(&er.token), json!({}))
        .await;
    assert_eq!(status, StatusCode::OK, "{bundle}");
    let doc = B64.decode(bundle["document"].as_str().unwrap()).unwrap();
    assert_eq!(client::open_emergency(&er.key, &doc).unwrap(), record);

    let (status, alerts) = s.get("/alerts", Some(&alice.token)).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(alerts.as_array().unwrap().len(), 1);
    assert_eq!(alerts[0]["kind"], "emergency-access");

    let (status, chain) = s.get("/audit/chain-status", Some("admin-secret")).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(chain["status"], "intact");

    // Nothing sent back in any of those responses carried the plaintext.
    assert_eq!(intrusions(&s.svc), 0);
}

#[tokio::test(flavor = "multi_thread", worker_threads = 4)]
async fn bad_sessions_get_401_and_are_logged() {
    let s = start(test_config()).await;
    let before = s.svc.hab().gatekeeper().index().unwrap().len();
    let (status, body) = s.get("/reviews", Some("not-a-session")).await;
    assert_eq!(status, StatusCode::UNAUTHORIZED, "{body}");
    let (status, _) = s.get("/reviews", None).await;
    assert_eq!(status, StatusCode::UNAUTHORIZED);
    let index = s.svc.hab().gatekeeper().index().unwrap();
    assert_eq!(index.len(), before + 1);
    assert!(index.values().any(|e| e.user.as_str() == hab::broker::ANONYMOUS));

    let (status, _) = s.post("/login", None, json!({ "username": "nobody", "password": "x" })).await;
    assert_eq!(status, StatusCode::UNAUTHORIZED);
}

#[tokio::test(flavor = "multi_thread", worker_threads = 4)]
async fn expired_sessions_are_rejected() {
    let s = start(ApiConfig {
        session_ttl_secs: 0,
        ..test_config()
    })
    .await;
    let alice = s.enroll("alice", UserKind::Patient, &[]).await;
    tokio::time::sleep(std::time::Duration::from_millis(20)).await;
    let (status, _) = s.get("/reviews", Some(&alice.token)).await;
    assert_eq!(status, StatusCode::UNAUTHORIZED);
}

#[tokio::test(flavor = "multi_thread", worker_threads = 4)]
async fn one_gatekeeper_entry_precedes_each_mutation() {
    let s = start(test_config()).await;
    let alice = s.enroll("alice", UserKind::Patient, &[]).await;
    let lab = s.enroll("citylab", UserKind::DataProvider, &["lab"]).await;
    let gk_before = s.svc.hab().gatekeeper().index().unwrap().len();
    let bl_before = s.svc.hab().broker_log().last_seq();
    let sealed = client::seal_for_patient(&lab.pp, &alice.user_id, b"x").unwrap();
    let (status, _) = s
        .post(
            "/uploads",
            Some(&lab.token),
            json!({ "patient": alice.user_id, "payload": B64.encode(&sealed) }),
        )
        .await;
    assert_eq!(status, StatusCode::CREATED);
    let index = s.svc.hab().gatekeeper().index().unwrap();
    assert_eq!(index.len(), gk_before + 1);
    let gk = index.values().max_by_key(|e| e.seq).unwrap();
    let entries = s.svc.hab().broker_log().entries().unwrap();
    let new: Vec<_> = entries
        .into_iter()
        .map(Option::unwrap)
        .filter(|e| e.seq > bl_before)
        .collect();
    assert_eq!(new.len(), 1);
    assert_eq!(new[0].param("request"), Some(gk.seq.to_string().as_str()));
    assert!(new[0].ts_ms >= gk.ts_ms);
}

#[tokio::test(flavor = "multi_thread", worker_threads = 4)]
async fn malformed_requests_are_400() {
    let s = start(test_config()).await;
    let alice = s.enroll("alice", UserKind::Patient, &[]).await;
    let (status, _) = s.get("/files/not-hex", Some(&alice.token)).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
    let (status, _) = s
        .post("/uploads", Some(&alice.token), json!({ "patient": "x", "payload": "***" }))
        .await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
    let (status, _) = s
        .post(
            "/revocations",
            Some(&alice.token),
            json!({ "subject_kind": "group", "subject": "x", "scope": "global" }),
        )
        .await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
}

#[test]
fn file_backed_service_survives_restart() {
    let dir = tempfile::tempdir().unwrap();
    let config = ApiConfig {
        database: dir.path().join("hab.db"),
        ..test_config()
    };
    let grant = dev_authority(SEED).issue_grant("alice", UserKind::Patient, &[], None);
    let pp_before = {
        let svc = Service::build(config.clone()).unwrap();
        svc.hab().register(&grant, PW).unwrap();
        svc.hab().public_params().to_bytes()
    };
    let svc = Service::build(config).unwrap();
    assert_eq!(svc.hab().public_params().to_bytes(), pp_before);
    svc.hab().login("alice", PW).unwrap();
    assert!(svc.hab().broker_log().verify_all().unwrap().is_intact());
    assert!(dir.path().join("hab.db.logs/brokers-log.ndjson").exists());
}
