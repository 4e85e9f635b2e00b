#![allow(dead_code)]

use std::sync::Arc;

use hab::abe::{PolicyTree, UserKey};
use hab::audit::{BrokerLog, Gatekeeper, MemoryLogStore};
use hab::db::Database;
use hab::access::{Session, UserKind};
use hab::broker::aia::AttributeAuthority;
use hab::broker::{Approval, DecisionOutcome, FileMeta, Hab, HabConfig, Registration, ReviewDecision};
use hab::client;
use hab::ids::{CloudId, UserId};
use hab::storage::CloudBackendDescriptor;

pub const PASSWORD: &str = "correct horse battery staple";

pub struct User {
    pub reg: Registration,
    pub session: Session,
}

impl User {
    pub fn id(&self) -> &UserId {
        &self.reg.user_id
    }

    pub fn token(&self) -> &str {
        &self.session.token
    }

    pub fn key(&self) -> &UserKey {
        &self.reg.key
    }
}

pub struct World {
    pub hab: Hab,
    pub aia: AttributeAuthority,
    pub clouds: Vec<CloudId>,
}

impl World {
    pub fn new(brokers: u32, clouds: usize) -> Self {
        Self::with_config(
            HabConfig {
                broker_count: brokers,
                test_seed: Some(7),
                ..HabConfig::default()
            },
            clouds,
        )
    }

    pub fn with_config(config: HabConfig, clouds: usize) -> Self {
        let aia = AttributeAuthority::from_seed("test-aia", 11);
        let hab = Hab::in_memory(config, aia.verifying_key()).expect("broker");
        let clouds = (0..clouds)
            .map(|i| {
                hab.mcp()
                    .register_backend(&CloudBackendDescriptor::in_memory(&format!("cloud-{i}")))
                    .expect("register cloud")
            })
            .collect();
        Self { hab, aia, clouds }
    }

    /// A world whose Brokers' Log sits on a store the caller can tamper with.
    pub fn with_memory_log(clouds: usize) -> (Self, Arc<MemoryLogStore>) {
        let aia = AttributeAuthority::from_seed("test-aia", 11);
        let store = Arc::new(MemoryLogStore::new());
        let config = HabConfig {
            test_seed: Some(7),
            ..HabConfig::default()
        };
        let hab = Hab::open(
            config,
            Database::in_memory().unwrap(),
            Arc::new(Gatekeeper::in_memory(1)),
            Arc::new(BrokerLog::open(store.clone()).unwrap()),
            aia.verifying_key(),
        )
        .expect("broker");
        let clouds = (0..clouds)
            .map(|i| {
                hab.mcp()
                    .register_backend(&CloudBackendDescriptor::in_memory(&format!("cloud-{i}")))
                    .expect("register cloud")
            })
            .collect();
        (Self { hab, aia, clouds }, store)
    }

    pub fn register(&self, username: &str, kind: UserKind, attrs: &[&str]) -> User {
        self.register_for(username, kind, attrs, None)
    }

    pub fn register_for(&self, username: &str, kind: UserKind, attrs: &[&str], acting_for: Option<UserId>) -> User {
        let grant = self.aia.issue_grant(username, kind, attrs, acting_for);
        let reg = self.hab.register(&grant, PASSWORD).expect("register");
        let session = self.hab.login(username, PASSWORD).expect("login");
        User { reg, session }
    }

    /// Provider submits, patient approves under `policy`. Returns the stored
    /// file version.
    pub fn upload(&self, provider: &User, patient: &User, policy: &str, body: &[u8], emergency: bool) -> FileMeta {
        self.upload_opts(provider, patient, policy, body, emergency, None, 3)
    }

    #[allow(clippy::too_many_arguments)]
    pub fn upload_opts(
        &self,
        provider: &User,
        patient: &User,
        policy: &str,
        body: &[u8],
        emergency: bool,
        target: Option<hab::ids::FileId>,
        threshold: usize,
    ) -> FileMeta {
        let pp = self.hab.public_params();
        let sealed = client::seal_for_patient(pp, patient.id(), body).unwrap();
        let item = self
            .hab
            .submit_upload(provider.token(), patient.id(), sealed, target)
            .expect("submit");
        let (queue, _) = self.hab.list_reviews(patient.token()).unwrap();
        let queued = queue.iter().find(|r| r.review_id == item.review_id).expect("queued");
        let plaintext = client::open_review_payload(patient.key(), &queued.payload).unwrap();
        assert_eq!(plaintext, body);
        let policy = PolicyTree::parse(policy).unwrap();
        let document = client::prepare_document(pp, &policy, &plaintext, emergency).unwrap();
        let outcome = self
            .hab
            .decide(
                patient.token(),
                item.review_id,
                ReviewDecision::Approve(Approval {
                    policy,
                    clouds: self.clouds.clone(),
                    threshold,
                    document,
                }),
            )
            .expect("approve");
        match outcome {
            DecisionOutcome::Approved(meta) => meta,
            other => panic!("unexpected outcome {other:?}"),
        }
    }
}
