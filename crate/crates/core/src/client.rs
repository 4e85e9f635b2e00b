//! Operations that run on the user's device: building ciphertexts before
//! they are handed to the broker and opening what comes back. None of these
//! need anything from the service except the public parameters.

use crate::abe::{self, AbeError, Attribute, EncryptOptions, EncryptedDocument, PolicyTree, PublicParams, UserKey};
use crate::ids::UserId;

/// Identity attribute the key management module adds to every patient
/// key. Data providers encrypt review payloads under it.
pub fn patient_attribute(patient: &UserId) -> Attribute {
    Attribute::new(&format!("patient-{}", patient.as_str())).expect("user ids are valid attribute text")
}

/// Encrypts a data provider's submission so only `patient` can read it
/// during review.
pub fn seal_for_patient(pp: &PublicParams, patient: &UserId, payload: &[u8]) -> Result<Vec<u8>, AbeError> {
    let policy = PolicyTree::Leaf(patient_attribute(patient));
    Ok(abe::encrypt(pp, &policy, payload)?.to_bytes())
}

/// Patient-side inverse of [`seal_for_patient`].
pub fn open_review_payload(key: &UserKey, sealed: &[u8]) -> Result<Vec<u8>, AbeError> {
    abe::decrypt(key, &EncryptedDocument::from_bytes(sealed)?)
}

/// Encrypts a record under the patient's chosen policy, optionally with the
/// emergency wrap, and returns the serialized document.
pub fn prepare_document(
    pp: &PublicParams,
    policy: &PolicyTree,
    plaintext: &[u8],
    emergency_access: bool,
) -> Result<Vec<u8>, AbeError> {
    let doc = abe::encrypt_with(
        pp,
        policy,
        plaintext,
        EncryptOptions { emergency_access },
        &mut rand::rngs::OsRng,
    )?;
    Ok(doc.to_bytes())
}

pub fn open_document(key: &UserKey, bytes: &[u8]) -> Result<Vec<u8>, AbeError> {
    abe::decrypt(key, &EncryptedDocument::from_bytes(bytes)?)
}

pub fn open_emergency(key: &UserKey, bytes: &[u8]) -> Result<Vec<u8>, AbeError> {
    abe::decrypt_emergency(key, &EncryptedDocument::from_bytes(bytes)?)
}
