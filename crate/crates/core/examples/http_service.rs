//! Start the HTTP service on a random port and talk to it with reqwest.

use std::sync::Arc;

use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine;
use hab::access::UserKind;
use hab::api::{dev_authority, ApiConfig, Service};
use serde_json::{json, Value};

#[tokio::main]
async fn main() -> Result<(), Box<dyn std::error::Error>> {
    let config = ApiConfig { aia_dev_seed: Some(1), ..ApiConfig::default() };
    let service = Arc::new(Service::build(config)?);
    let listener = tokio::net::TcpListener::bind("127.0.0.1:0").await?;
    let base = format!("http://{}", listener.local_addr()?);
    let (stop, stopped) = tokio::sync::oneshot::channel::<()>();
    let server = tokio::spawn(service.clone().serve_on(listener, async {
        let _ = stopped.await;
    }));

    let http = reqwest::Client::new();
    let health: Value = http.get(format!("{base}/health")).send().await?.json().await?;
    println!("health: {health}");

    let grant = dev_authority(1).issue_grant("alice", UserKind::Patient, &[], None);
    let reg: Value = http
        .post(format!("{base}/register"))
        .json(&json!({ "grant": grant, "password": "example password" }))
        .send()
        .await?
        .json()
        .await?;
    let key_len = B64.decode(reg["key"].as_str().unwrap_or_default())?.len();
    println!("registered {} on broker {}, key {key_len} bytes", reg["user_id"], reg["broker_id"]);

    let login: Value = http
        .post(format!("{base}/login"))
        .json(&json!({ "username": "alice", "password": "example password" }))
        .send()
        .await?
        .json()
        .await?;
    let token = login["token"].as_str().unwrap_or_default();
    let reviews: Value = http.get(format!("{base}/reviews")).bearer_auth(token).send().await?.json().await?;
    println!("review queue: {reviews}");

    let status = http.get(format!("{base}/reviews")).send().await?.status();
    println!("without a token: {status}");

    let _ = stop.send(());
    server.await??;
    Ok(())
}
