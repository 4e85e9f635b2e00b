//! Build a Brokers' Log, let the inspector check it, then tamper with it.

use std::collections::BTreeMap;
use std::sync::Arc;

use hab::audit::{
    AlertStore, BrokerLog, Gatekeeper, Inspector, MemoryLogStore, Module, RequestKind, RuleSet,
};
use hab::db::Database;
use hab::ids::{BrokerId, FileId, UserId};

fn params(pairs: &[(&str, String)]) -> BTreeMap<String, String> {
    pairs.iter().map(|(k, v)| (k.to_string(), v.clone())).collect()
}

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let store = Arc::new(MemoryLogStore::new());
    let gk = Arc::new(Gatekeeper::in_memory(1));
    let bl = Arc::new(BrokerLog::open(store.clone())?);
    let db = Database::in_memory()?;
    let alerts = AlertStore::new(db.clone());
    let inspector = Inspector::new(gk.clone(), bl.clone(), RuleSet::default_rules(), alerts, db)?;

    let b = BrokerId(0);
    let doctor = UserId::for_username("drbob");
    let file = FileId::random();

    // A properly requested, checked retrieval.
    let req = gk.record(b, &doctor, RequestKind::Retrieve, params(&[("file_id", file.to_string())]))?;
    bl.append(b, Module::Aacm, "check_access", params(&[
        ("request", req.to_string()),
        ("requestor", doctor.to_string()),
        ("file_id", file.to_string()),
        ("decision", "allow".into()),
    ]))?;
    bl.append(b, Module::Mcp, "retrieve", params(&[("request", req.to_string()), ("file_id", file.to_string())]))?;
    println!("honest run: {} alerts", inspector.poll()?.len());

    // A retrieval nobody asked for.
    bl.append(b, Module::Mcp, "retrieve", params(&[("file_id", FileId::random().to_string())]))?;
    for a in inspector.poll()? {
        println!("alert {:?} at entry {:?}: {}", a.finding.kind, a.finding.bl_seq, a.finding.description);
    }

    store.flip_bit(1, 200);
    println!("after a bit flip: {:?}", bl.verify_all()?);
    for a in inspector.poll()? {
        println!("alert {:?} at entry {:?}", a.finding.kind, a.finding.bl_seq);
    }
    Ok(())
}
