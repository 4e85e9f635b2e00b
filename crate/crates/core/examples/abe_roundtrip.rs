//! Encrypt a record under an attribute policy and try three keys against it.

use hab::abe::{self, AttributeSet, EncryptOptions, PolicyTree};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let (pp, msk) = abe::setup(128)?;
    let policy = PolicyTree::parse("(doctor AND cardiology) OR THRESHOLD(2, nurse, icu, night_shift)")?;
    let doc = abe::encrypt_with(
        &pp,
        &policy,
        b"<ecg>sinus rhythm</ecg>",
        EncryptOptions { emergency_access: true },
        &mut rand::thread_rng(),
    )?;
    println!("policy: {policy}");
    println!("ciphertext: {} bytes", doc.to_bytes().len());

    for attrs in [
        vec!["doctor", "cardiology"],
        vec!["nurse", "night_shift"],
        vec!["doctor", "radiology"],
    ] {
        let key = abe::keygen(&msk, &AttributeSet::from_names(&attrs)?)?;
        match abe::decrypt(&key, &doc) {
            Ok(pt) => println!("{attrs:?}: {}", String::from_utf8_lossy(&pt)),
            Err(e) => println!("{attrs:?}: refused ({e})"),
        }
    }

    let er = abe::keygen(&msk, &AttributeSet::from_names([abe::EMERGENCY_ATTRIBUTE])?)?;
    let pt = abe::decrypt_emergency(&er, &doc)?;
    println!("emergency wrap: {}", String::from_utf8_lossy(&pt));
    Ok(())
}
