//! Split a blob into 5 shares with threshold 3 and show which subsets work.

use hab::ids::BlobId;
use hab::sharing;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let secret = b"blood type O negative; allergic to penicillin";
    let shares = sharing::split(BlobId::random(), secret, 5, 3)?;
    for s in &shares {
        println!("share {} of {} (t={}): {} bytes", s.share_id, s.total, s.threshold, s.to_bytes().len());
    }

    let two = &shares[1..3];
    println!("two shares: {}", sharing::combine(two, 3).unwrap_err());

    let three = [shares[0].clone(), shares[2].clone(), shares[4].clone()];
    let out = sharing::combine(&three, 3)?;
    println!("shares 1, 3, 5: {}", String::from_utf8_lossy(&out));
    Ok(())
}
