//! A patient revokes a doctor and then the cardiology attribute; stored
//! shares are never touched.

use hab::abe::{Attribute, PolicyTree};
use hab::access::{RevocationScope, UserKind};
use hab::broker::aia::AttributeAuthority;
use hab::broker::{Approval, DecisionOutcome, Hab, HabConfig, ReviewDecision};
use hab::client;
use hab::storage::CloudBackendDescriptor;

const PW: &str = "example password";

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let aia = AttributeAuthority::generate("example-aia");
    let hab = Hab::in_memory(HabConfig::default(), aia.verifying_key())?;
    let clouds = (0..5)
        .map(|i| hab.mcp().register_backend(&CloudBackendDescriptor::in_memory(&format!("cloud-{i}"))))
        .collect::<Result<Vec<_>, _>>()?;

    let join = |name: &str, kind, attrs: &[&str]| -> Result<_, Box<dyn std::error::Error>> {
        let reg = hab.register(&aia.issue_grant(name, kind, attrs, None), PW)?;
        let session = hab.login(name, PW)?;
        Ok((reg, session.token))
    };
    let (alice, alice_tok) = join("alice", UserKind::Patient, &[])?;
    let (_, lab_tok) = join("citylab", UserKind::DataProvider, &["lab"])?;
    let (doctor, doctor_tok) = join("drbob", UserKind::DataRequestor, &["doctor", "cardiology"])?;

    let sealed = client::seal_for_patient(hab.public_params(), &alice.user_id, b"<echo/>")?;
    let item = hab.submit_upload(&lab_tok, &alice.user_id, sealed, None)?;
    let policy = PolicyTree::parse("doctor AND cardiology")?;
    let document = client::prepare_document(hab.public_params(), &policy, b"<echo/>", false)?;
    let DecisionOutcome::Approved(file) = hab.decide(
        &alice_tok,
        item.review_id,
        ReviewDecision::Approve(Approval { policy, clouds, threshold: 3, document }),
    )?
    else {
        unreachable!()
    };

    let doc = hab.retrieve(&doctor_tok, file.file_id)?;
    println!("before: {}", String::from_utf8_lossy(&client::open_document(&doctor.key, &doc.to_bytes())?));

    hab.revoke_user(&alice_tok, &doctor.user_id, RevocationScope::File(file.file_id))?;
    println!("after user revocation: {}", hab.retrieve(&doctor_tok, file.file_id).unwrap_err());

    hab.revoke_attribute(&alice_tok, &Attribute::new("cardiology")?, RevocationScope::Global)?;
    println!("decision now: {:?}", hab.access().check_access(&doctor.user_id, file.file_id)?);
    println!("blob unchanged: {}", hab.file_meta(file.file_id)?.unwrap().blob_id == file.blob_id);
    Ok(())
}
