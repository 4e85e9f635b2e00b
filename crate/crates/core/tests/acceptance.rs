//! Acceptance suite. Runs every criterion in order, prints one PASS/FAIL
//! line per criterion and exits nonzero if any fails.

mod common;

use std::collections::{BTreeMap, BTreeSet};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::process::ExitCode;
use std::sync::Arc;
use std::time::{Duration, Instant};

use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine;
use common::{User, World};
use hab::abe::{self, AbeError, Attribute, AttributeSet, PolicyTree, UserKey};
use hab::access::{Decision, DenyReason, RevocationScope, UserKind};
use hab::api::{dev_authority, ApiConfig, Service};
use hab::audit::{AlertKind, BrokerLog, MemoryLogStore, Module, RequestKind};
use hab::bench::{self, BenchConfig, Operation, STANDARD_SIZES};
use hab::broker::{Approval, BrokerError, ReviewDecision};
use hab::client;
use hab::ids::{BlobId, BrokerId, FileId, ReviewId, UserId};
use hab::sharing::{self, Share};
use hab::storage::CloudBackendDescriptor;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde_json::{json, Value};

const SHARING_BUDGET: Duration = Duration::from_secs(60);
const UNIFORMITY_SPLITS: usize = 2_000;
const UNIFORMITY_MIN_VALUES: usize = 200;
const ABE_POLICIES: usize = 50;
const ABE_COLLUSION_POLICIES: usize = 20;
const ABE_BUDGET: Duration = Duration::from_secs(300);
const REVOCATION_LIMIT: Duration = Duration::from_millis(10);
const REVOCATION_REPS: usize = 20;
const POLICY_UPDATE_LIMIT: Duration = Duration::from_secs(1);
const MIN_FORGED_SEQUENCES: usize = 5;
const CHAIN_ENTRIES: usize = 10;
const E2E_BUDGET: Duration = Duration::from_secs(120);
const ENCRYPT_RATIO_LIMIT: f64 = 5.0;

type Outcome = Result<String, String>;
type Criterion = (&'static str, fn() -> Outcome);

fn ensure(cond: bool, msg: impl Into<String>) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg.into())
    }
}

fn main() -> ExitCode {
    let criteria: [Criterion; 8] = [
        ("secret-sharing correctness", sharing_correctness),
        ("share uniformity smoke test", share_uniformity),
        ("CP-ABE soundness and collusion resistance", abe_soundness),
        ("revocation immediacy and policy update latency", revocation_immediacy),
        ("threats: key retention, sub-threshold clouds, review bypass", threat_tests),
        ("audit detection", audit_detection),
        ("end-to-end workflow", end_to_end),
        ("bench structure", bench_structure),
    ];
    let filter: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let mut failed = 0;
    let mut ran = 0;
    for (i, (name, run)) in criteria.iter().enumerate() {
        if !filter.is_empty() && !filter.iter().any(|f| name.contains(f.as_str())) {
            continue;
        }
        ran += 1;
        let start = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(run)).unwrap_or_else(|panic| {
            let msg = panic
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| panic.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panic".into());
            Err(format!("panicked: {msg}"))
        });
        let secs = start.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("PASS  AC{} {name}: {detail} ({secs:.2}s)", i + 1),
            Err(detail) => {
                failed += 1;
                println!("FAIL  AC{} {name}: {detail} ({secs:.2}s)", i + 1);
            }
        }
    }
    println!("acceptance: {} of {ran} criteria passed", ran - failed);
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}

/// All index subsets of `0..n` with exactly `k` members.
fn subsets(n: usize, k: usize) -> Vec<Vec<usize>> {
    (0u32..(1 << n))
        .filter(|m| m.count_ones() as usize == k)
        .map(|m| (0..n).filter(|i| m & (1 << i) != 0).collect())
        .collect()
}

fn sharing_correctness() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha20Rng::seed_from_u64(0x5eed);
    let mut reconstructed = 0;
    let mut refused = 0;
    for (n, t) in [(3, 2), (5, 3), (7, 4)] {
        for size in [1, 1 << 10, 10 << 10, 100 << 10] {
            let mut data = vec![0u8; size];
            rng.fill_bytes(&mut data);
            let shares = sharing::split_with_rng(BlobId::random_with(&mut rng), &data, n, t, &mut rng)
                .map_err(|e| e.to_string())?;
            for subset in subsets(n, t) {
                let picked: Vec<Share> = subset.iter().map(|&i| shares[i].clone()).collect();
                let out = sharing::combine(&picked, t).map_err(|e| format!("({n},{t}) {size}B {subset:?}: {e}"))?;
                ensure(out == data, format!("({n},{t}) {size}B {subset:?} reconstructed wrong bytes"))?;
                reconstructed += 1;
            }
            for subset in subsets(n, t - 1) {
                let picked: Vec<Share> = subset.iter().map(|&i| shares[i].clone()).collect();
                ensure(
                    sharing::combine(&picked, t).is_err() && sharing::combine(&picked, t - 1).is_err(),
                    format!("({n},{t}) {size}B {subset:?}: T-1 shares were accepted"),
                )?;
                refused += 1;
            }
        }
    }
    let elapsed = start.elapsed();
    ensure(elapsed < SHARING_BUDGET, format!("took {elapsed:?}, budget {SHARING_BUDGET:?}"))?;
    Ok(format!(
        "{reconstructed} T-subsets reconstructed bit-exactly, {refused} (T-1)-subsets refused in {:.2}s (< {}s)",
        elapsed.as_secs_f64(),
        SHARING_BUDGET.as_secs()
    ))
}

fn share_uniformity() -> Outcome {
    let mut seen = BTreeSet::new();
    for _ in 0..UNIFORMITY_SPLITS {
        let shares = sharing::split(BlobId::random(), &[0x2a], 2, 2).map_err(|e| e.to_string())?;
        seen.insert(shares[0].payload[0]);
    }
    ensure(
        seen.len() >= UNIFORMITY_MIN_VALUES,
        format!("share 1 covered only {} of 256 values", seen.len()),
    )?;
    Ok(format!(
        "share 1 took {} distinct values over {UNIFORMITY_SPLITS} splits of one byte (need >= {UNIFORMITY_MIN_VALUES})",
        seen.len()
    ))
}

const UNIVERSE: [&str; 5] = ["a", "b", "c", "d", "e"];

/// Test-local policy representation with its own evaluator, used as the
/// oracle for decryption outcomes.
#[derive(Debug, Clone)]
enum Tree {
    Leaf(usize),
    Gate(usize, Vec<Tree>),
}

impl Tree {
    fn random(rng: &mut ChaCha20Rng, depth: u32) -> Tree {
        if depth == 0 || rng.gen_bool(0.3) {
            return Tree::Leaf(rng.gen_range(0..UNIVERSE.len()));
        }
        let n = rng.gen_range(2..=4);
        let children: Vec<Tree> = (0..n).map(|_| Tree::random(rng, depth - 1)).collect();
        Tree::Gate(rng.gen_range(1..=n), children)
    }

    fn holds(&self, mask: u32) -> bool {
        match self {
            Tree::Leaf(i) => mask & (1 << i) != 0,
            Tree::Gate(k, children) => children.iter().filter(|c| c.holds(mask)).count() >= *k,
        }
    }

    fn to_policy(&self) -> PolicyTree {
        match self {
            Tree::Leaf(i) => PolicyTree::leaf(UNIVERSE[*i]).unwrap(),
            Tree::Gate(k, children) => {
                PolicyTree::threshold(*k, children.iter().map(Tree::to_policy).collect()).unwrap()
            }
        }
    }
}

fn mask_attrs(mask: u32) -> Option<AttributeSet> {
    let names: Vec<&str> = (0..5).filter(|i| mask & (1 << i) != 0).map(|i| UNIVERSE[i]).collect();
    AttributeSet::from_names(names).ok()
}

fn abe_soundness() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha20Rng::seed_from_u64(0xabe);
    let (pp, msk) = abe::setup_seeded(128, 17).map_err(|e| e.to_string())?;
    let keys: BTreeMap<u32, UserKey> = (1u32..32)
        .map(|m| (m, abe::keygen_with_rng(&msk, &mask_attrs(m).unwrap(), &mut rng).unwrap()))
        .collect();
    ensure(mask_attrs(0).is_none(), "an empty attribute set was accepted for key issuance")?;

    let mut agreements = 0;
    let mut successes = 0;
    for p in 0..ABE_POLICIES {
        let tree = Tree::random(&mut rng, 3);
        let policy = tree.to_policy();
        let doc = abe::encrypt_with(&pp, &policy, format!("record {p}").as_bytes(), Default::default(), &mut rng)
            .map_err(|e| e.to_string())?;
        ensure(!tree.holds(0), format!("policy {policy} is satisfied by the empty set"))?;
        agreements += 1;
        for (&mask, key) in &keys {
            let ok = abe::decrypt(key, &doc).is_ok();
            ensure(
                ok == tree.holds(mask),
                format!("policy {policy}, attributes {:?}: decrypt {ok}, oracle {}", mask_attrs(mask).unwrap().names(), tree.holds(mask)),
            )?;
            agreements += 1;
            successes += ok as usize;
        }
    }

    let mut collusions = 0;
    let mut attempts = 0;
    while collusions < ABE_COLLUSION_POLICIES {
        attempts += 1;
        ensure(attempts < 10_000, "could not find enough collusion candidates")?;
        let tree = Tree::random(&mut rng, 3);
        let pair = (1u32..32)
            .flat_map(|a| (1u32..32).map(move |b| (a, b)))
            .find(|&(a, b)| a & b == 0 && !tree.holds(a) && !tree.holds(b) && tree.holds(a | b));
        let Some((a, b)) = pair else { continue };
        let policy = tree.to_policy();
        let doc = abe::encrypt_with(&pp, &policy, b"collusion target", Default::default(), &mut rng)
            .map_err(|e| e.to_string())?;
        // Fresh keys for the two colluders.
        let ka = abe::keygen_with_rng(&msk, &mask_attrs(a).unwrap(), &mut rng).unwrap();
        let kb = abe::keygen_with_rng(&msk, &mask_attrs(b).unwrap(), &mut rng).unwrap();
        for (base, other) in [(&ka, &kb), (&kb, &ka)] {
            let mut parts = base.components().clone();
            for (attr, comp) in other.components() {
                parts.entry(attr.clone()).or_insert_with(|| comp.clone());
            }
            let mixed = UserKey::from_components(base.key_id(), *base.root(), parts).map_err(|e| e.to_string())?;
            match abe::decrypt(&mixed, &doc) {
                Err(AbeError::NotSatisfied) => return Err(format!("mixed key for {policy} was not tried")),
                Err(_) => {}
                Ok(_) => return Err(format!("collusion decrypted {policy}")),
            }
        }
        collusions += 1;
    }
    let elapsed = start.elapsed();
    ensure(elapsed < ABE_BUDGET, format!("took {elapsed:?}, budget {ABE_BUDGET:?}"))?;
    Ok(format!(
        "{agreements} policy/subset outcomes match the oracle ({successes} decrypts), \
         {collusions} collusion mixtures rejected both ways, {:.1}s (< {}s)",
        elapsed.as_secs_f64(),
        ABE_BUDGET.as_secs()
    ))
}

/// All stored objects across backends, keyed by (cloud, key).
fn backend_contents(w: &World) -> BTreeMap<(String, String), Vec<u8>> {
    let mut out = BTreeMap::new();
    for cloud in &w.clouds {
        let backend = w.hab.mcp().backend(cloud).unwrap();
        for key in backend.keys().unwrap() {
            let bytes = backend.get(&key).unwrap();
            out.insert((cloud.to_string(), key), bytes);
        }
    }
    out
}

fn mean(samples: &[Duration]) -> Duration {
    samples.iter().sum::<Duration>() / samples.len() as u32
}

fn revocation_immediacy() -> Outcome {
    let w = World::new(1, 5);
    let alice = w.register("alice", UserKind::Patient, &[]);
    let lab = w.register("citylab", UserKind::DataProvider, &["lab"]);
    let doctor = w.register("drbob", UserKind::DataRequestor, &["doctor", "cardiology"]);
    let meta = w.upload(&lab, &alice, "doctor AND cardiology", b"<ecg/>", false);
    w.hab.retrieve(doctor.token(), meta.file_id).map_err(|e| e.to_string())?;
    let before = backend_contents(&w);
    let log_before = w.hab.broker_log().last_seq();

    let scope = RevocationScope::File(meta.file_id);
    let mut user_times = Vec::new();
    for _ in 0..REVOCATION_REPS {
        let t = Instant::now();
        w.hab.revoke_user(alice.token(), doctor.id(), scope.clone()).map_err(|e| e.to_string())?;
        user_times.push(t.elapsed());
        let decision = w.hab.access().check_access(doctor.id(), meta.file_id).map_err(|e| e.to_string())?;
        ensure(
            decision == Decision::Deny(DenyReason::FileRevoked),
            format!("after revoke: {decision:?}"),
        )?;
        w.hab
            .set_revocation(alice.token(), hab::access::RevocationSubject::User(doctor.id().clone()), scope.clone(), false)
            .map_err(|e| e.to_string())?;
    }
    let attr = Attribute::new("cardiology").unwrap();
    let mut attr_times = Vec::new();
    for _ in 0..REVOCATION_REPS {
        let t = Instant::now();
        w.hab.revoke_attribute(alice.token(), &attr, scope.clone()).map_err(|e| e.to_string())?;
        attr_times.push(t.elapsed());
        let decision = w.hab.access().check_access(doctor.id(), meta.file_id).map_err(|e| e.to_string())?;
        ensure(
            matches!(decision, Decision::Deny(DenyReason::AttributeRevoked { .. })),
            format!("after attribute revoke: {decision:?}"),
        )?;
        w.hab
            .set_revocation(alice.token(), hab::access::RevocationSubject::Attribute(attr.clone()), scope.clone(), false)
            .map_err(|e| e.to_string())?;
    }
    w.hab.revoke_user(alice.token(), doctor.id(), scope).map_err(|e| e.to_string())?;
    ensure(
        matches!(w.hab.retrieve(doctor.token(), meta.file_id), Err(BrokerError::AccessDenied { .. })),
        "retrieval after revocation was not denied",
    )?;

    // Zero re-encryption: stored objects are byte-identical and no store or
    // delete action was logged.
    ensure(backend_contents(&w) == before, "revocation changed stored shares")?;
    ensure(
        w.hab.file_meta(meta.file_id).unwrap().unwrap().blob_id == meta.blob_id,
        "revocation produced a new file version",
    )?;
    let actions: Vec<String> = w.hab.broker_log().entries().unwrap()[log_before as usize..]
        .iter()
        .map(|e| e.as_ref().unwrap().event_kind())
        .collect();
    ensure(
        !actions.iter().any(|a| a == "MCP.store" || a == "MCP.delete"),
        "storage actions logged during revocation",
    )?;

    let (mu, ma) = (mean(&user_times), mean(&attr_times));
    ensure(mu < REVOCATION_LIMIT, format!("user revocation mean {mu:?}"))?;
    ensure(ma < REVOCATION_LIMIT, format!("attribute revocation mean {ma:?}"))?;

    let t = Instant::now();
    w.hab
        .update_policy(alice.token(), meta.file_id, PolicyTree::parse("doctor").unwrap(), None)
        .map_err(|e| e.to_string())?;
    let narrow = t.elapsed();
    let t = Instant::now();
    let wide = PolicyTree::parse("doctor OR nurse").unwrap();
    let document = client::prepare_document(w.hab.public_params(), &wide, b"<ecg/>", false).unwrap();
    w.hab
        .update_policy(alice.token(), meta.file_id, wide, Some((document, w.clouds.clone(), 3)))
        .map_err(|e| e.to_string())?;
    let widen = t.elapsed();
    ensure(narrow < POLICY_UPDATE_LIMIT, format!("policy update took {narrow:?}"))?;
    ensure(widen < POLICY_UPDATE_LIMIT, format!("re-encrypting policy update took {widen:?}"))?;

    Ok(format!(
        "deny immediately with stored shares unchanged; user revoke mean {:.3} ms (max {:.3}), attribute revoke mean {:.3} ms (max {:.3}), limit {} ms; policy update {:.2} ms, with re-encryption {:.2} ms, limit {} ms",
        mu.as_secs_f64() * 1e3,
        user_times.iter().max().unwrap().as_secs_f64() * 1e3,
        ma.as_secs_f64() * 1e3,
        attr_times.iter().max().unwrap().as_secs_f64() * 1e3,
        REVOCATION_LIMIT.as_millis(),
        narrow.as_secs_f64() * 1e3,
        widen.as_secs_f64() * 1e3,
        POLICY_UPDATE_LIMIT.as_millis()
    ))
}

fn contains(haystack: &[u8], needle: &[u8]) -> bool {
    needle.len() <= haystack.len() && haystack.windows(needle.len()).any(|w| w == needle)
}

fn read_tree(dir: &Path, out: &mut Vec<(String, Vec<u8>)>) {
    for entry in std::fs::read_dir(dir).unwrap() {
        let path = entry.unwrap().path();
        if path.is_dir() {
            read_tree(&path, out);
        } else {
            out.push((path.display().to_string(), std::fs::read(&path).unwrap()));
        }
    }
}

/// Secret-bearing fragments of a serialized key: 32-byte chunks past the
/// header, raw and hex encoded, plus the whole key in base64.
fn key_needles(key: &UserKey) -> Vec<Vec<u8>> {
    let bytes = key.to_bytes();
    let mut needles: Vec<Vec<u8>> = bytes[21..].chunks_exact(32).map(<[u8]>::to_vec).collect();
    let hexes: Vec<Vec<u8>> = needles.iter().map(|c| hex::encode(c).into_bytes()).collect();
    needles.extend(hexes);
    needles.push(B64.encode(&bytes).into_bytes());
    needles
}

fn threat_tests() -> Outcome {
    let key_scan = no_key_retention()?;
    let shares = sub_threshold_clouds()?;
    let forged = no_review_bypass()?;
    Ok(format!("key retention: {key_scan}; sub-threshold: {shares}; bypass: {forged}"))
}

fn no_key_retention() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let config = ApiConfig {
        database: dir.path().join("hab.db"),
        backends: (0..5)
            .map(|i| CloudBackendDescriptor::local_directory(&format!("cloud-{i}"), dir.path().join(format!("cloud-{i}"))))
            .collect(),
        aia_dev_seed: Some(1),
        test_seed: Some(1),
        ..ApiConfig::default()
    };
    let svc = Service::build(config).map_err(|e| e.to_string())?;
    let hab = svc.hab();
    let aia = dev_authority(1);
    let mut keys = Vec::new();
    let mut tokens = Vec::new();
    for (name, kind, attrs) in [
        ("alice", UserKind::Patient, vec![]),
        ("citylab", UserKind::DataProvider, vec!["lab"]),
        ("drbob", UserKind::DataRequestor, vec!["doctor"]),
        ("er-desk", UserKind::Hospital, vec!["emergency_room"]),
    ] {
        let reg = hab
            .register(&aia.issue_grant(name, kind, &attrs, None), common::PASSWORD)
            .map_err(|e| e.to_string())?;
        keys.push(reg.key);
        tokens.push(hab.login(name, common::PASSWORD).map_err(|e| e.to_string())?.token);
    }
    // Exercise the stores with a full upload and retrieval.
    let alice = UserId::for_username("alice");
    let sealed = client::seal_for_patient(hab.public_params(), &alice, b"<note/>").unwrap();
    let item = hab.submit_upload(&tokens[1], &alice, sealed, None).map_err(|e| e.to_string())?;
    let policy = PolicyTree::parse("doctor").unwrap();
    let document = client::prepare_document(hab.public_params(), &policy, b"<note/>", true).unwrap();
    hab.decide(
        &tokens[0],
        item.review_id,
        ReviewDecision::Approve(Approval {
            policy,
            clouds: hab.mcp().cloud_ids(),
            threshold: 3,
            document,
        }),
    )
    .map_err(|e| e.to_string())?;
    drop(svc);

    let mut files = Vec::new();
    read_tree(dir.path(), &mut files);
    let total: usize = files.iter().map(|(_, b)| b.len()).sum();
    let mut needles = 0;
    for key in &keys {
        for needle in key_needles(key) {
            needles += 1;
            if let Some((path, _)) = files.iter().find(|(_, bytes)| contains(bytes, &needle)) {
                return Err(format!("key material for {} found in {path}", key.key_id()));
            }
        }
    }
    ensure(files.len() >= 8, format!("only {} persistent files were scanned", files.len()))?;
    Ok(format!(
        "{} key fragments absent from {} persisted files ({} bytes)",
        needles,
        files.len(),
        total
    ))
}

fn sub_threshold_clouds() -> Outcome {
    let w = World::new(1, 5);
    let alice = w.register("alice", UserKind::Patient, &[]);
    let lab = w.register("citylab", UserKind::DataProvider, &["lab"]);
    let doctor = w.register("drbob", UserKind::DataRequestor, &["doctor"]);
    let meta = w.upload(&lab, &alice, "doctor", b"<xray>left wrist</xray>", false);
    let document = w.hab.retrieve(doctor.token(), meta.file_id).map_err(|e| e.to_string())?.to_bytes();
    let t = meta.threshold;

    let shares_on = |clouds: &[usize]| -> Vec<Share> {
        clouds
            .iter()
            .flat_map(|&c| {
                let backend = w.hab.mcp().backend(&w.clouds[c]).unwrap();
                backend
                    .keys()
                    .unwrap()
                    .into_iter()
                    .map(move |k| Share::from_bytes(&backend.get(&k).unwrap()).unwrap())
            })
            .collect()
    };
    let mut refused = 0;
    for subset in subsets(w.clouds.len(), t - 1) {
        let shares = shares_on(&subset);
        ensure(sharing::combine(&shares, t).is_err(), format!("clouds {subset:?} reconstructed"))?;
        // An attacker ignoring the recorded threshold gets unrelated bytes.
        let forged: Vec<Share> = shares
            .iter()
            .cloned()
            .map(|mut s| {
                s.threshold = (t - 1) as u8;
                s
            })
            .collect();
        let guess = sharing::combine(&forged, t - 1).map_err(|e| e.to_string())?;
        ensure(guess != document, format!("clouds {subset:?} leaked the document"))?;
        ensure(abe::EncryptedDocument::from_bytes(&guess).is_err(), "guess parsed as a document")?;
        refused += 1;
    }
    for subset in subsets(w.clouds.len(), t) {
        let out = sharing::combine(&shares_on(&subset), t).map_err(|e| e.to_string())?;
        ensure(out == document, format!("clouds {subset:?} failed to reconstruct"))?;
    }
    Ok(format!(
        "all {refused} sets of {} clouds fail to reconstruct, all {} sets of {t} succeed",
        t - 1,
        subsets(w.clouds.len(), t).len()
    ))
}

fn no_review_bypass() -> Outcome {
    let w = World::new(1, 3);
    let alice = w.register("alice", UserKind::Patient, &[]);
    let bob = w.register("bob", UserKind::Patient, &[]);
    let lab = w.register("citylab", UserKind::DataProvider, &["lab"]);
    let doctor = w.register("drbob", UserKind::DataRequestor, &["doctor"]);
    let existing = w.upload(&lab, &alice, "doctor", b"<v1/>", false);
    let bobs = w.upload(&lab, &bob, "doctor", b"<bob/>", false);
    let pp = w.hab.public_params().clone();
    let approval = |body: &[u8]| {
        let policy = PolicyTree::parse("doctor").unwrap();
        ReviewDecision::Approve(Approval {
            document: client::prepare_document(&pp, &policy, body, false).unwrap(),
            policy,
            clouds: w.clouds.clone(),
            threshold: 2,
        })
    };
    let submit = |target: Option<FileId>| {
        let sealed = client::seal_for_patient(&pp, alice.id(), b"<forged/>").unwrap();
        w.hab.submit_upload(lab.token(), alice.id(), sealed, target).unwrap().review_id
    };
    let snapshot = |w: &World| {
        (
            backend_contents(w),
            w.hab.mcp().stored_files().unwrap(),
            w.hab.file_meta(existing.file_id).unwrap(),
            w.hab.access().policy(existing.file_id).map(|p| p.policy.to_string()),
        )
    };
    let before = snapshot(&w);

    let replayed = submit(None);
    let approved = w.hab.decide(alice.token(), replayed, approval(b"<ok/>"));
    ensure(approved.is_ok(), "setup approval failed")?;
    let before_after_setup = snapshot(&w);

    type Attempt<'a> = (&'a str, Box<dyn Fn() -> Result<(), BrokerError> + 'a>, fn(&BrokerError) -> bool);
    let attempts: Vec<Attempt> = vec![
        (
            "provider approves its own submission",
            Box::new(|| w.hab.decide(lab.token(), submit(None), approval(b"<x/>")).map(drop)),
            |e| matches!(e, BrokerError::NotOwner),
        ),
        (
            "provider approves its own update of an existing record",
            Box::new(|| w.hab.decide(lab.token(), submit(Some(existing.file_id)), approval(b"<x/>")).map(drop)),
            |e| matches!(e, BrokerError::NotOwner),
        ),
        (
            "provider replaces a record through the policy endpoint",
            Box::new(|| {
                let policy = PolicyTree::parse("doctor").unwrap();
                let doc = client::prepare_document(&pp, &policy, b"<x/>", false).unwrap();
                w.hab
                    .update_policy(lab.token(), existing.file_id, policy, Some((doc, w.clouds.clone(), 2)))
                    .map(drop)
            }),
            |e| matches!(e, BrokerError::NotOwner),
        ),
        (
            "another patient approves the submission",
            Box::new(|| w.hab.decide(bob.token(), submit(None), approval(b"<x/>")).map(drop)),
            |e| matches!(e, BrokerError::NotOwner),
        ),
        (
            "approval of a fabricated review id",
            Box::new(|| w.hab.decide(alice.token(), ReviewId::random(), approval(b"<x/>")).map(drop)),
            |e| matches!(e, BrokerError::NotFound(_)),
        ),
        (
            "replay of an approved review",
            Box::new(|| w.hab.decide(alice.token(), replayed, approval(b"<x/>")).map(drop)),
            |e| matches!(e, BrokerError::ReviewClosed(_)),
        ),
        (
            "approval with a forged session token",
            Box::new(|| w.hab.decide("f00d", submit(None), approval(b"<x/>")).map(drop)),
            |e| matches!(e, BrokerError::Unauthorized(_)),
        ),
        (
            "requestor submits a record",
            Box::new(|| w.hab.submit_upload(doctor.token(), alice.id(), b"x".to_vec(), None).map(drop)),
            |e| matches!(e, BrokerError::Forbidden(_)),
        ),
        (
            "provider targets another patient's file",
            Box::new(|| {
                let sealed = client::seal_for_patient(&pp, alice.id(), b"x").unwrap();
                w.hab.submit_upload(lab.token(), alice.id(), sealed, Some(bobs.file_id)).map(drop)
            }),
            |e| matches!(e, BrokerError::NotFound(_)),
        ),
    ];
    ensure(attempts.len() >= MIN_FORGED_SEQUENCES, "bypass suite too small")?;
    for (name, attempt, expected) in &attempts {
        match attempt() {
            Ok(()) => return Err(format!("bypass accepted: {name}")),
            Err(e) if expected(&e) => {}
            Err(e) => return Err(format!("{name}: unexpected error {e}")),
        }
        ensure(snapshot(&w) == before_after_setup, format!("storage changed after: {name}"))?;
    }
    ensure(before.2 == before_after_setup.2, "existing record changed during setup")?;
    Ok(format!("{} forged sequences rejected with storage unchanged", attempts.len()))
}

struct Honest {
    w: World,
    store: Arc<MemoryLogStore>,
    doctor: User,
    file: FileId,
}

/// An honest workflow covering every request kind except emergency access.
fn honest_run() -> Result<Honest, String> {
    let (w, store) = World::with_memory_log(5);
    let alice = w.register("alice", UserKind::Patient, &[]);
    let lab = w.register("citylab", UserKind::DataProvider, &["lab"]);
    let doctor = w.register("drbob", UserKind::DataRequestor, &["doctor", "cardiology"]);
    let nurse = w.register("nurse", UserKind::DataRequestor, &["nurse"]);
    let son = w.register_for("alice-son", UserKind::TrustedContact, &[], Some(alice.id().clone()));
    let err = |e: BrokerError| e.to_string();

    let f1 = w.upload(&lab, &alice, "doctor AND cardiology", b"<ecg/>", false);
    let f2 = w.upload(&lab, &alice, "doctor OR nurse", b"<bloods/>", true);
    w.hab.retrieve(doctor.token(), f1.file_id).map_err(err)?;
    ensure(w.hab.retrieve(nurse.token(), f1.file_id).is_err(), "nurse read f1")?;
    w.hab.request_access(nurse.token(), f1.file_id, "please").map_err(err)?;
    w.hab.retrieve(nurse.token(), f2.file_id).map_err(err)?;
    w.hab.revoke_user(alice.token(), nurse.id(), RevocationScope::File(f2.file_id)).map_err(err)?;
    ensure(w.hab.retrieve(nurse.token(), f2.file_id).is_err(), "revoked nurse read f2")?;
    w.hab
        .set_revocation(
            son.token(),
            hab::access::RevocationSubject::User(nurse.id().clone()),
            RevocationScope::File(f2.file_id),
            false,
        )
        .map_err(err)?;
    w.hab
        .update_policy(alice.token(), f2.file_id, PolicyTree::parse("doctor").unwrap(), None)
        .map_err(err)?;
    let wide = PolicyTree::parse("doctor OR nurse OR cardiology").unwrap();
    let doc = client::prepare_document(w.hab.public_params(), &wide, b"<bloods/>", true).unwrap();
    w.hab
        .update_policy(alice.token(), f2.file_id, wide, Some((doc, w.clouds.clone(), 3)))
        .map_err(err)?;
    w.upload_opts(&lab, &alice, "doctor AND cardiology", b"<ecg v2/>", false, Some(f1.file_id), 3);
    let sealed = client::seal_for_patient(w.hab.public_params(), alice.id(), b"<junk/>").unwrap();
    let item = w.hab.submit_upload(lab.token(), alice.id(), sealed, None).map_err(err)?;
    w.hab.decide(alice.token(), item.review_id, ReviewDecision::Reject).map_err(err)?;
    w.hab.list_reviews(son.token()).map_err(err)?;
    w.hab.alerts(alice.token()).map_err(err)?;
    w.hab.chain_status(alice.token()).map_err(err)?;
    w.hab.retrieve(doctor.token(), f1.file_id).map_err(err)?;
    ensure(w.hab.reconcile().map_err(err)? == 0, "honest run left dangling blobs")?;
    Ok(Honest {
        w,
        store,
        doctor,
        file: f1.file_id,
    })
}

fn poll(h: &Honest) -> Vec<hab::audit::Alert> {
    h.w.hab.inspector().unwrap().poll().unwrap();
    h.w.hab.alert_store().all().unwrap()
}

fn kv(pairs: &[(&str, String)]) -> BTreeMap<String, String> {
    pairs.iter().map(|(k, v)| (k.to_string(), v.clone())).collect()
}

fn audit_detection() -> Outcome {
    let honest = honest_run()?;
    let alerts = poll(&honest);
    ensure(alerts.is_empty(), format!("honest run raised {} alerts: {:?}", alerts.len(), alerts.first()))?;
    ensure(honest.w.hab.broker_log().verify_all().unwrap().is_intact(), "honest chain broken")?;
    let honest_entries = honest.w.hab.broker_log().last_seq();

    type Mutation = (&'static str, fn(&Honest) -> u64, AlertKind);
    let mutations: [Mutation; 5] = [
        ("unrequested action", mutate_unrequested, AlertKind::UnrequestedAction),
        ("file-id mismatch", mutate_file_mismatch, AlertKind::FieldMismatch),
        ("missing access check", mutate_missing_check, AlertKind::MissingAccessCheck),
        ("bit-flip tamper", mutate_bit_flip, AlertKind::ChainBroken),
        ("truncation", mutate_truncation, AlertKind::Truncation),
    ];
    let mut detected = Vec::new();
    for (name, mutate, kind) in mutations {
        let h = honest_run()?;
        ensure(poll(&h).is_empty(), "fresh honest run raised alerts")?;
        let offending = mutate(&h);
        let alerts = poll(&h);
        let hit = alerts.iter().find(|a| a.finding.bl_seq == Some(offending) && a.finding.kind == kind);
        ensure(
            hit.is_some(),
            format!(
                "{name}: no {kind:?} alert naming entry {offending}; got {:?}",
                alerts.iter().map(|a| (a.finding.kind, a.finding.bl_seq)).collect::<Vec<_>>()
            ),
        )?;
        detected.push(format!("{name} -> entry {offending}"));
    }

    // Exhaustive single-bit tamper over a fresh chain.
    let store = Arc::new(MemoryLogStore::new());
    let log = BrokerLog::open(store.clone()).unwrap();
    for i in 0..CHAIN_ENTRIES {
        log.append(
            BrokerId(0),
            Module::Aacm,
            "check_access",
            kv(&[("request", i.to_string()), ("file_id", FileId::random().to_string())]),
        )
        .unwrap();
    }
    let lines = log.lines().unwrap();
    let mut flips = 0;
    let mut caught = 0;
    for (index, line) in lines.iter().enumerate() {
        for bit in 0..line.len() * 8 {
            store.flip_bit(index, bit);
            flips += 1;
            if !log.verify_chain(1, CHAIN_ENTRIES as u64).unwrap().is_intact() {
                caught += 1;
            }
            store.flip_bit(index, bit);
        }
    }
    ensure(log.verify_all().unwrap().is_intact(), "chain not restored")?;
    ensure(caught == flips, format!("verify_chain caught {caught} of {flips} bit flips"))?;

    Ok(format!(
        "honest run of {honest_entries} entries raised 0 alerts; mutations detected: {}; {caught}/{flips} single-bit flips detected (100%)",
        detected.join(", ")
    ))
}

fn gk_seq_of(h: &Honest, kind: RequestKind) -> u64 {
    h.w.hab
        .gatekeeper()
        .index()
        .unwrap()
        .into_values()
        .filter(|e| e.kind == kind)
        .map(|e| e.seq)
        .max()
        .unwrap()
}

fn mutate_unrequested(h: &Honest) -> u64 {
    let login = gk_seq_of(h, RequestKind::Login);
    let meta = h.w.hab.file_meta(h.file).unwrap().unwrap();
    h.w.hab
        .broker_log()
        .append(
            BrokerId(0),
            Module::Mcp,
            "retrieve",
            kv(&[
                ("request", login.to_string()),
                ("file_id", h.file.to_string()),
                ("blob_id", meta.blob_id.to_string()),
            ]),
        )
        .unwrap()
        .seq
}

fn mutate_file_mismatch(h: &Honest) -> u64 {
    let hab = &h.w.hab;
    let req = hab
        .gatekeeper()
        .record(BrokerId(0), h.doctor.id(), RequestKind::Retrieve, kv(&[("file_id", h.file.to_string())]))
        .unwrap();
    hab.broker_log()
        .append(
            BrokerId(0),
            Module::Aacm,
            "check_access",
            kv(&[
                ("request", req.to_string()),
                ("requestor", h.doctor.id().to_string()),
                ("file_id", h.file.to_string()),
                ("decision", "allow".into()),
            ]),
        )
        .unwrap();
    hab.broker_log()
        .append(
            BrokerId(0),
            Module::Mcp,
            "retrieve",
            kv(&[("request", req.to_string()), ("file_id", FileId::random().to_string())]),
        )
        .unwrap()
        .seq
}

fn mutate_missing_check(h: &Honest) -> u64 {
    let hab = &h.w.hab;
    let req = hab
        .gatekeeper()
        .record(BrokerId(0), h.doctor.id(), RequestKind::Retrieve, kv(&[("file_id", h.file.to_string())]))
        .unwrap();
    hab.broker_log()
        .append(
            BrokerId(0),
            Module::Mcp,
            "retrieve",
            kv(&[("request", req.to_string()), ("file_id", h.file.to_string())]),
        )
        .unwrap()
        .seq
}

fn mutate_bit_flip(h: &Honest) -> u64 {
    let index = 5;
    let len = h.store.read_all_lines()[index].len();
    h.store.flip_bit(index, len * 4 + 3);
    index as u64 + 1
}

fn mutate_truncation(h: &Honest) -> u64 {
    let len = h.store.read_all_lines().len();
    h.store.truncate(len - 3);
    (len - 3) as u64 + 1
}

trait Lines {
    fn read_all_lines(&self) -> Vec<Vec<u8>>;
}

impl Lines for MemoryLogStore {
    fn read_all_lines(&self) -> Vec<Vec<u8>> {
        hab::audit::LogStore::read_all(self).unwrap()
    }
}

fn end_to_end() -> Outcome {
    let start = Instant::now();
    let runtime = tokio::runtime::Runtime::new().unwrap();
    let detail = runtime.block_on(e2e_http())?;
    let elapsed = start.elapsed();
    ensure(elapsed < E2E_BUDGET, format!("took {elapsed:?}, budget {E2E_BUDGET:?}"))?;
    Ok(format!("{detail}; {:.2}s (< {}s)", elapsed.as_secs_f64(), E2E_BUDGET.as_secs()))
}

async fn e2e_http() -> Outcome {
    let config = ApiConfig {
        broker_count: 2,
        threshold: 3,
        total: 5,
        backends: (0..5)
            .map(|i| CloudBackendDescriptor::latency_mock(&format!("mock-{i}"), 2, 0.0))
            .collect(),
        aia_dev_seed: Some(9),
        test_seed: Some(9),
        ..ApiConfig::default()
    };
    let svc = Arc::new(Service::build(config).map_err(|e| e.to_string())?);
    let listener = tokio::net::TcpListener::bind("127.0.0.1:0").await.unwrap();
    let base = format!("http://{}", listener.local_addr().unwrap());
    let (stop, stopped) = tokio::sync::oneshot::channel::<()>();
    tokio::spawn(svc.clone().serve_on(listener, async {
        let _ = stopped.await;
    }));
    let http = reqwest::Client::new();
    let call = |method: reqwest::Method, path: String, token: Option<String>, body: Option<Value>| {
        let mut req = http.request(method, format!("{base}{path}"));
        if let Some(t) = token {
            req = req.bearer_auth(t);
        }
        if let Some(b) = body {
            req = req.json(&b);
        }
        async move {
            let resp = req.send().await.map_err(|e| e.to_string())?;
            let status = resp.status().as_u16();
            Ok::<(u16, Value), String>((status, resp.json().await.unwrap_or(Value::Null)))
        }
    };
    let aia = dev_authority(9);
    let mut users = BTreeMap::new();
    for (name, kind, attrs) in [
        ("citylab", UserKind::DataProvider, vec!["lab"]),
        ("alice", UserKind::Patient, vec![]),
        ("drbob", UserKind::DataRequestor, vec!["doctor", "cardiology"]),
        ("nurse", UserKind::DataRequestor, vec!["nurse"]),
        ("er-desk", UserKind::Hospital, vec!["emergency_room"]),
    ] {
        let grant = aia.issue_grant(name, kind, &attrs, None);
        let (s, reg) = call(
            reqwest::Method::POST,
            "/register".into(),
            None,
            Some(json!({ "grant": grant, "password": common::PASSWORD })),
        )
        .await?;
        ensure(s == 200, format!("register {name}: {s} {reg}"))?;
        let (s, login) = call(
            reqwest::Method::POST,
            "/login".into(),
            None,
            Some(json!({ "username": name, "password": common::PASSWORD })),
        )
        .await?;
        ensure(s == 200, format!("login {name}: {s}"))?;
        let key = UserKey::from_bytes(&B64.decode(reg["key"].as_str().unwrap()).unwrap()).unwrap();
        users.insert(name, (login["token"].as_str().unwrap().to_string(), key, reg["user_id"].as_str().unwrap().to_string()));
    }
    let pp = svc.hab().public_params().clone();
    let tok = |n: &str| Some(users[n].0.clone());
    let alice_id = UserId(users["alice"].2.clone());

    let original = bench::xml_payload(4096, &mut ChaCha20Rng::seed_from_u64(3));
    let sealed = client::seal_for_patient(&pp, &alice_id, &original).unwrap();
    let (s, _) = call(
        reqwest::Method::POST,
        "/uploads".into(),
        tok("citylab"),
        Some(json!({ "patient": alice_id, "payload": B64.encode(&sealed) })),
    )
    .await?;
    ensure(s == 201, format!("submit: {s}"))?;
    let (_, queue) = call(reqwest::Method::GET, "/reviews".into(), tok("alice"), None).await?;
    let review = &queue["reviews"][0];
    let plain = client::open_review_payload(&users["alice"].1, &B64.decode(review["payload"].as_str().unwrap()).unwrap())
        .map_err(|e| e.to_string())?;
    let policy = PolicyTree::parse("doctor AND cardiology").unwrap();
    let document = client::prepare_document(&pp, &policy, &plain, true).unwrap();
    let clouds: Vec<String> = (0..5).map(|i| format!("mock-{i}")).collect();
    let (s, decided) = call(
        reqwest::Method::POST,
        format!("/reviews/{}/decision", review["review_id"].as_str().unwrap()),
        tok("alice"),
        Some(json!({ "decision": "approve", "policy": policy, "clouds": clouds, "threshold": 3,
                     "document": B64.encode(&document) })),
    )
    .await?;
    ensure(s == 200, format!("approve: {s} {decided}"))?;
    let file_id = decided["file"]["file_id"].as_str().unwrap().to_string();
    ensure(decided["file"]["total"] == 5 && decided["file"]["threshold"] == 3, "wrong (N,T)")?;

    let (s, got) = call(reqwest::Method::GET, format!("/files/{file_id}"), tok("drbob"), None).await?;
    ensure(s == 200, format!("retrieve: {s}"))?;
    let decrypted = client::open_document(&users["drbob"].1, &B64.decode(got["document"].as_str().unwrap()).unwrap())
        .map_err(|e| e.to_string())?;
    ensure(decrypted == original, "decrypted payload differs from the original")?;

    let (s, denied) = call(reqwest::Method::GET, format!("/files/{file_id}"), tok("nurse"), None).await?;
    ensure(s == 403 && denied["reason"] == "policy", format!("denied requestor got {s} {denied}"))?;
    let (_, queue) = call(reqwest::Method::GET, "/reviews".into(), tok("alice"), None).await?;
    let requests = queue["access_requests"].as_array().cloned().unwrap_or_default();
    ensure(
        requests.iter().any(|r| r["requestor"] == users["nurse"].2.as_str() && r["file_id"] == file_id.as_str()),
        "patient did not receive the access request",
    )?;

    let (s, bundle) = call(
        reqwest::Method::POST,
        format!("/emergency/{alice_id}/{file_id}"),
        tok("er-desk"),
        Some(json!({})),
    )
    .await?;
    ensure(s == 200, format!("emergency: {s} {bundle}"))?;
    let er_plain = client::open_emergency(&users["er-desk"].1, &B64.decode(bundle["document"].as_str().unwrap()).unwrap())
        .map_err(|e| e.to_string())?;
    ensure(er_plain == original, "emergency decrypt differs")?;
    let flagged = svc
        .hab()
        .broker_log()
        .entries()
        .unwrap()
        .into_iter()
        .flatten()
        .filter(|e| e.param("emergency") == Some("true") && e.param("file_id") == Some(file_id.as_str()))
        .map(|e| e.event_kind())
        .collect::<Vec<_>>();
    ensure(flagged.contains(&"DMM.emergency_release".to_string()), format!("no flagged release: {flagged:?}"))?;
    let (_, alerts) = call(reqwest::Method::GET, "/alerts".into(), tok("alice"), None).await?;
    ensure(
        alerts.as_array().is_some_and(|a| a.iter().any(|x| x["kind"] == "emergency-access")),
        "patient received no emergency alert",
    )?;
    let _ = stop.send(());
    Ok(format!(
        "5 users over HTTP, approve on 5 mock clouds with T=3, retrieve decrypts to the original, denied requestor queued a request, emergency release flagged ({}) and patient alerted",
        flagged.join(", ")
    ))
}

fn bench_structure() -> Outcome {
    let report = bench::run_bench(&BenchConfig {
        sizes: STANDARD_SIZES.to_vec(),
        reps: bench::MIN_REPS,
        cloud_delay: Duration::from_millis(1),
        ..BenchConfig::default()
    })
    .map_err(|e| e.to_string())?;
    for &size in &STANDARD_SIZES {
        for op in Operation::SIZED {
            let row = report.row(Some(size), op).ok_or(format!("missing {op:?} at {size}"))?;
            ensure(row.reps >= bench::MIN_REPS, "too few repetitions")?;
        }
    }
    for op in Operation::FIXED {
        ensure(report.row(None, op).is_some(), format!("missing {op:?}"))?;
    }
    let split: Vec<f64> = STANDARD_SIZES
        .iter()
        .map(|&s| report.row(Some(s), Operation::Split).unwrap().mean_secs)
        .collect();
    ensure(split.windows(2).all(|w| w[1] > w[0]), format!("split times not strictly increasing: {split:?}"))?;
    let enc: Vec<f64> = STANDARD_SIZES
        .iter()
        .map(|&s| report.row(Some(s), Operation::Encrypt).unwrap().mean_secs)
        .collect();
    let ratio = enc.iter().cloned().fold(0.0, f64::max) / enc.iter().cloned().fold(f64::INFINITY, f64::min);
    ensure(ratio < ENCRYPT_RATIO_LIMIT, format!("encrypt max/min {ratio:.2}"))?;
    ensure(report.passed(), "report's own structural checks failed")?;
    Ok(format!(
        "5 sizes x 3 operations + 3 fixed operations; split {} strictly increasing; encrypt max/min {ratio:.2} (< {ENCRYPT_RATIO_LIMIT})",
        split.iter().map(|s| format!("{:.4}", s)).collect::<Vec<_>>().join(" < ")
    ))
}
