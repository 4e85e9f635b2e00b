//! The whole patient-controlled flow in one process: a lab submits, the
//! patient reviews and publishes, a doctor reads, a nurse is refused and
//! asks, and the ER uses break-glass access.

use hab::abe::PolicyTree;
use hab::access::UserKind;
use hab::broker::aia::AttributeAuthority;
use hab::broker::{Approval, BrokerError, DecisionOutcome, Hab, HabConfig, ReviewDecision};
use hab::client;
use hab::storage::CloudBackendDescriptor;

const PW: &str = "example password";

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let aia = AttributeAuthority::generate("example-aia");
    let hab = Hab::in_memory(HabConfig { broker_count: 2, ..HabConfig::default() }, aia.verifying_key())?;
    let clouds = (0..5)
        .map(|i| hab.mcp().register_backend(&CloudBackendDescriptor::latency_mock(&format!("mock-{i}"), 5, 0.0)))
        .collect::<Result<Vec<_>, _>>()?;

    let join = |name: &str, kind, attrs: &[&str]| -> Result<_, Box<dyn std::error::Error>> {
        let reg = hab.register(&aia.issue_grant(name, kind, attrs, None), PW)?;
        println!("{name} registered on broker {}", reg.broker_id);
        Ok((reg.key, hab.login(name, PW)?.token, reg.user_id))
    };
    let (alice_key, alice, alice_id) = join("alice", UserKind::Patient, &[])?;
    let (_, lab, _) = join("citylab", UserKind::DataProvider, &["lab"])?;
    let (doc_key, doctor, _) = join("drbob", UserKind::DataRequestor, &["doctor", "cardiology"])?;
    let (_, nurse, _) = join("nina", UserKind::DataRequestor, &["nurse"])?;
    let (er_key, er, _) = join("er-desk", UserKind::Hospital, &["emergency_room"])?;

    let pp = hab.public_params();
    let sealed = client::seal_for_patient(pp, &alice_id, b"<labs><hba1c>5.4</hba1c></labs>")?;
    hab.submit_upload(&lab, &alice_id, sealed, None)?;

    let (queue, _) = hab.list_reviews(&alice)?;
    let item = &queue[0];
    let body = client::open_review_payload(&alice_key, &item.payload)?;
    println!("alice reviews: {}", String::from_utf8_lossy(&body));
    let policy = PolicyTree::parse("doctor AND cardiology")?;
    let document = client::prepare_document(pp, &policy, &body, true)?;
    let DecisionOutcome::Approved(file) = hab.decide(
        &alice,
        item.review_id,
        ReviewDecision::Approve(Approval { policy, clouds, threshold: 3, document }),
    )?
    else {
        unreachable!()
    };
    println!("published {} as ({}, {}) shares", file.file_id, file.total, file.threshold);

    let doc = hab.retrieve(&doctor, file.file_id)?;
    println!("doctor reads: {}", String::from_utf8_lossy(&client::open_document(&doc_key, &doc.to_bytes())?));

    if let Err(BrokerError::AccessDenied { reason, access_request }) = hab.retrieve(&nurse, file.file_id) {
        println!("nurse denied ({}), request {access_request:?} queued", reason.code());
    }
    let (_, requests) = hab.list_reviews(&alice)?;
    println!("alice has {} access request(s)", requests.len());

    let bundle = hab.emergency_retrieve(&er, &alice_id, file.file_id)?;
    let plain = client::open_emergency(&er_key, &bundle.document)?;
    println!("ER reads under break-glass: {}", String::from_utf8_lossy(&plain));
    for alert in hab.alerts(&alice)? {
        println!("alice alerted: {}", alert.finding.description);
    }
    Ok(())
}
