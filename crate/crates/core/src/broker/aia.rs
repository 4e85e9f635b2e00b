//! In-process stand-in for an Attribute Issuing Authority. It signs
//! attribute grants that the broker verifies at registration.

use ed25519_dalek::{Signature, Signer, SigningKey, Verifier, VerifyingKey};
use rand::rngs::OsRng;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::abe::{Attribute, PolicyError};
use crate::access::UserKind;
use crate::ids::UserId;

/// Attribute names starting with this prefix are issued by the broker
/// itself and can never appear in a grant.
pub const RESERVED_PREFIX: &str = "patient-";

#[derive(Debug, Error)]
pub enum GrantError {
    #[error("grant signature does not verify")]
    BadSignature,
    #[error("grant is for {granted:?}, not {requested:?}")]
    UsernameMismatch { granted: String, requested: String },
    #[error("attribute {0:?} uses a reserved prefix")]
    ReservedAttribute(String),
    #[error("malformed grant: {0}")]
    Malformed(String),
    #[error(transparent)]
    Attributes(#[from] PolicyError),
}

/// Signed statement that `username` holds `attributes`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AttributeGrant {
    pub authority: String,
    pub username: String,
    pub kind: UserKind,
    pub attributes: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub acting_for: Option<UserId>,
    pub issued_at_ms: i64,
    /// Hex ed25519 signature over [`AttributeGrant::signed_bytes`].
    pub signature: String,
}

#[derive(Serialize)]
struct SignedPart<'a> {
    authority: &'a str,
    username: &'a str,
    kind: UserKind,
    attributes: &'a [String],
    acting_for: Option<&'a UserId>,
    issued_at_ms: i64,
}

impl AttributeGrant {
    pub fn signed_bytes(&self) -> Vec<u8> {
        let part = SignedPart {
            authority: &self.authority,
            username: &self.username,
            kind: self.kind,
            attributes: &self.attributes,
            acting_for: self.acting_for.as_ref(),
            issued_at_ms: self.issued_at_ms,
        };
        let mut out = b"HAB-AIA-GRANT-V1\0".to_vec();
        out.extend(serde_json::to_vec(&part).expect("grant serializes"));
        out
    }
}

pub struct AttributeAuthority {
    name: String,
    key: SigningKey,
}

impl std::fmt::Debug for AttributeAuthority {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("AttributeAuthority")
            .field("name", &self.name)
            .field("public_key", &hex::encode(self.key.verifying_key().as_bytes()))
            .finish()
    }
}

impl AttributeAuthority {
    pub fn generate(name: &str) -> Self {
        Self {
            name: name.to_string(),
            key: SigningKey::generate(&mut OsRng),
        }
    }

    pub fn from_seed(name: &str, seed: u64) -> Self {
        Self {
            name: name.to_string(),
            key: SigningKey::generate(&mut ChaCha20Rng::seed_from_u64(seed)),
        }
    }

    pub fn verifying_key(&self) -> VerifyingKey {
        self.key.verifying_key()
    }

    pub fn issue_grant(
        &self,
        username: &str,
        kind: UserKind,
        attributes: &[&str],
        acting_for: Option<UserId>,
    ) -> AttributeGrant {
        let mut grant = AttributeGrant {
            authority: self.name.clone(),
            username: username.to_string(),
            kind,
            attributes: attributes.iter().map(|a| a.to_string()).collect(),
            acting_for,
            issued_at_ms: chrono::Utc::now().timestamp_millis(),
            signature: String::new(),
        };
        grant.signature = hex::encode(self.key.sign(&grant.signed_bytes()).to_bytes());
        grant
    }
}

/// Checks the signature and returns the normalized attributes, which may
/// be empty.
pub fn verify_grant(key: &VerifyingKey, grant: &AttributeGrant) -> Result<Vec<Attribute>, GrantError> {
    let sig_bytes: [u8; 64] = hex::decode(&grant.signature)
        .ok()
        .and_then(|b| b.try_into().ok())
        .ok_or_else(|| GrantError::Malformed("signature is not 64 hex-encoded bytes".into()))?;
    key.verify(&grant.signed_bytes(), &Signature::from_bytes(&sig_bytes))
        .map_err(|_| GrantError::BadSignature)?;
    let mut attrs = grant
        .attributes
        .iter()
        .map(|a| Attribute::new(a))
        .collect::<Result<Vec<_>, _>>()?;
    if let Some(bad) = attrs.iter().find(|a| a.as_str().starts_with(RESERVED_PREFIX)) {
        return Err(GrantError::ReservedAttribute(bad.to_string()));
    }
    attrs.sort();
    attrs.dedup();
    Ok(attrs)
}

pub fn parse_verifying_key(hex_key: &str) -> Result<VerifyingKey, GrantError> {
    let bytes: [u8; 32] = hex::decode(hex_key.trim())
        .ok()
        .and_then(|b| b.try_into().ok())
        .ok_or_else(|| GrantError::Malformed("public key is not 32 hex-encoded bytes".into()))?;
    VerifyingKey::from_bytes(&bytes).map_err(|e| GrantError::Malformed(e.to_string()))
}
