//! Spread shares over five simulated clouds and read back with two offline.

use std::sync::Arc;

use hab::db::Database;
use hab::ids::{BlobId, CloudId};
use hab::sharing;
use hab::storage::{MemoryBackend, MultiCloudProxy};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let proxy = MultiCloudProxy::new(Database::in_memory()?);
    let mut handles = Vec::new();
    let mut clouds = Vec::new();
    for name in ["aws", "azure", "gcp", "ovh", "hetzner"] {
        let backend = Arc::new(MemoryBackend::new());
        clouds.push(proxy.register_instance(CloudId::new(name), name, backend.clone())?);
        handles.push(backend);
    }

    let blob = BlobId::random();
    let data = vec![0x42u8; 64 * 1024];
    let shares = sharing::split(blob, &data, clouds.len(), 3)?;
    proxy.upload_shares(blob, &shares, &clouds)?;
    for entry in proxy.index_entries(blob)? {
        println!("share {} -> {}", entry.share_id, entry.cloud_id);
    }

    handles[0].set_available(false);
    handles[3].set_available(false);
    let back = proxy.retrieve_file(blob, 3)?;
    println!("aws and ovh offline, read {} bytes, intact: {}", back.len(), back == data);

    handles[1].set_available(false);
    match proxy.retrieve_file(blob, 3) {
        Ok(_) => println!("unexpected success"),
        Err(e) => println!("azure offline too: {e}"),
    }
    Ok(())
}
