//! Ciphertext-policy attribute-based encryption with hybrid document
//! encryption.
//!
//! A document is encrypted under a fresh 256-bit data key with
//! ChaCha20-Poly1305. The data key is derived from a random target-group
//! element, and only that element is attribute-encrypted, so the pairing
//! work in [`encrypt`] depends on the policy size and never on the document
//! length.
//!
//! ```
//! use hab::abe::{self, AttributeSet, PolicyTree};
//!
//! let (pp, msk) = abe::setup(128).unwrap();
//! let key = abe::keygen(&msk, &AttributeSet::from_names(["doctor", "cardiology"]).unwrap()).unwrap();
//! let policy = PolicyTree::parse("(doctor AND cardiology) OR admin").unwrap();
//! let doc = abe::encrypt(&pp, &policy, b"<record/>").unwrap();
//! assert_eq!(abe::decrypt(&key, &doc).unwrap(), b"<record/>");
//! ```

mod policy;
mod scheme;

use std::collections::BTreeMap;

use ark_bls12_381::{Fr, G1Affine, G2Affine};
use ark_serialize::{CanonicalDeserialize, CanonicalSerialize};
use chacha20poly1305::aead::{Aead, KeyInit, Payload};
use chacha20poly1305::{ChaCha20Poly1305, Key, Nonce};
use rand::rngs::OsRng;
use rand::{CryptoRng, RngCore, SeedableRng};
use rand_chacha::ChaCha20Rng;
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::ids::{DocId, KeyId};
use crate::wire::{put_bytes32, Reader, WireError};

pub use policy::{parse_policy, satisfies, Attribute, AttributeSet, PolicyError, PolicyTree};
pub use scheme::{
    hash_attribute, Gt, KeyComponent, LeafCiphertext, MasterSecret, PublicParams, WrappedKey,
    SUPPORTED_SECURITY_LEVEL,
};

/// Attribute carried by hospital emergency-room keys. Documents encrypted
/// with emergency access enabled wrap their data key under this attribute
/// as well.
pub const EMERGENCY_ATTRIBUTE: &str = "emergency_room";

const FORMAT_VERSION: u8 = 1;
const NONCE_LEN: usize = 12;
const DEK_DOMAIN: &[u8] = b"HAB-DEK-V1";

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum AbeError {
    #[error("unsupported security level {0} (supported: 128)")]
    UnsupportedSecurityLevel(u16),
    #[error("attributes do not satisfy the policy")]
    NotSatisfied,
    #[error("integrity check failed")]
    IntegrityFailure,
    #[error("plaintext must not be empty")]
    EmptyPlaintext,
    #[error("document has no emergency access wrap")]
    NoEmergencyWrap,
    #[error("malformed input: {0}")]
    Malformed(String),
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error(transparent)]
    Wire(#[from] WireError),
}

/// Private key for one attribute set. All components share the issuance
/// randomness of this key.
#[derive(Clone, PartialEq, Eq)]
pub struct UserKey {
    key_id: KeyId,
    attributes: AttributeSet,
    root: G2Affine,
    components: BTreeMap<Attribute, KeyComponent>,
}

impl std::fmt::Debug for UserKey {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("UserKey")
            .field("key_id", &self.key_id)
            .field("attributes", &self.attributes)
            .finish_non_exhaustive()
    }
}

impl UserKey {
    /// Assembles a key from raw parts. Used when deserializing; parts taken
    /// from different keys do not form a working key.
    pub fn from_components(
        key_id: KeyId,
        root: G2Affine,
        components: BTreeMap<Attribute, KeyComponent>,
    ) -> Result<Self, AbeError> {
        let attributes = AttributeSet::new(components.keys().cloned())?;
        Ok(Self {
            key_id,
            attributes,
            root,
            components,
        })
    }

    pub fn key_id(&self) -> KeyId {
        self.key_id
    }

    pub fn attributes(&self) -> &AttributeSet {
        &self.attributes
    }

    pub fn root(&self) -> &G2Affine {
        &self.root
    }

    pub fn components(&self) -> &BTreeMap<Attribute, KeyComponent> {
        &self.components
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = b"HABK".to_vec();
        out.push(FORMAT_VERSION);
        out.extend_from_slice(self.key_id.as_bytes());
        put_point(&mut out, &self.root);
        out.extend_from_slice(&(self.components.len() as u16).to_be_bytes());
        for (attr, comp) in &self.components {
            let name = attr.as_str().as_bytes();
            out.extend_from_slice(&(name.len() as u16).to_be_bytes());
            out.extend_from_slice(name);
            put_point(&mut out, &comp.d);
            put_point(&mut out, &comp.d_prime);
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, AbeError> {
        let mut r = Reader::new(bytes);
        r.magic("HABK")?;
        r.version(FORMAT_VERSION)?;
        let key_id = KeyId(r.array()?);
        let root: G2Affine = get_point(&mut r)?;
        let count = r.u16()?;
        let mut components = BTreeMap::new();
        for _ in 0..count {
            let len = r.u16()? as usize;
            let name = std::str::from_utf8(r.take(len)?)
                .map_err(|_| AbeError::Malformed("attribute name is not UTF-8".into()))?;
            let attr = Attribute::new(name)?;
            let comp = KeyComponent {
                d: get_point(&mut r)?,
                d_prime: get_point(&mut r)?,
            };
            components.insert(attr, comp);
        }
        r.finish()?;
        Self::from_components(key_id, root, components)
    }
}

impl PublicParams {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = b"HABP".to_vec();
        out.push(FORMAT_VERSION);
        out.extend_from_slice(&self.security_level.to_be_bytes());
        put_point(&mut out, &self.h);
        put_point(&mut out, &self.egg_alpha);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, AbeError> {
        let mut r = Reader::new(bytes);
        r.magic("HABP")?;
        r.version(FORMAT_VERSION)?;
        let security_level = r.u16()?;
        let pp = PublicParams {
            security_level,
            h: get_point(&mut r)?,
            egg_alpha: get_point(&mut r)?,
        };
        r.finish()?;
        Ok(pp)
    }
}

impl MasterSecret {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = b"HABM".to_vec();
        out.push(FORMAT_VERSION);
        put_point(&mut out, &self.beta);
        put_point(&mut out, &self.g2_alpha);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, AbeError> {
        let mut r = Reader::new(bytes);
        r.magic("HABM")?;
        r.version(FORMAT_VERSION)?;
        let beta: Fr = get_point(&mut r)?;
        let g2_alpha = get_point(&mut r)?;
        r.finish()?;
        Ok(MasterSecret { beta, g2_alpha })
    }
}

impl WrappedKey {
    fn write(&self, out: &mut Vec<u8>) {
        put_point(out, &self.c_tilde);
        put_point(out, &self.c);
        out.extend_from_slice(&(self.leaves.len() as u32).to_be_bytes());
        for leaf in &self.leaves {
            put_point(out, &leaf.c);
            put_point(out, &leaf.c_prime);
        }
    }

    fn read(r: &mut Reader<'_>) -> Result<Self, AbeError> {
        let c_tilde = get_point(r)?;
        let c: G1Affine = get_point(r)?;
        let count = r.u32()? as usize;
        let mut leaves = Vec::with_capacity(count.min(1024));
        for _ in 0..count {
            leaves.push(LeafCiphertext {
                c: get_point(r)?,
                c_prime: get_point(r)?,
            });
        }
        Ok(WrappedKey { c_tilde, c, leaves })
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        self.write(&mut out);
        out
    }
}

fn put_point<T: CanonicalSerialize>(out: &mut Vec<u8>, p: &T) {
    p.serialize_compressed(out).expect("writing to a Vec cannot fail");
}

fn get_point<T: CanonicalDeserialize>(r: &mut Reader<'_>) -> Result<T, AbeError> {
    let start = r.offset();
    let remaining = r.remaining();
    let mut cursor = remaining;
    let value = T::deserialize_compressed(&mut cursor)
        .map_err(|e| AbeError::Malformed(format!("group element at offset {start}: {e}")))?;
    r.take(remaining.len() - cursor.len())?;
    Ok(value)
}

/// Options for [`encrypt_with`].
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct EncryptOptions {
    /// Also wrap the data key under [`EMERGENCY_ATTRIBUTE`] so hospital
    /// emergency keys can open the document.
    pub emergency_access: bool,
}

/// Hybrid ciphertext: attribute-wrapped data key plus an AEAD body.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EncryptedDocument {
    pub doc_id: DocId,
    pub policy: PolicyTree,
    pub wrapped_dek: WrappedKey,
    pub emergency_dek: Option<WrappedKey>,
    pub nonce: [u8; NONCE_LEN],
    pub body: Vec<u8>,
}

impl EncryptedDocument {
    /// Everything up to and including the nonce. Bound into the AEAD as
    /// associated data, so header tampering also fails authentication.
    pub fn header_bytes(&self) -> Vec<u8> {
        let mut out = b"HABE".to_vec();
        out.push(FORMAT_VERSION);
        out.extend_from_slice(self.doc_id.as_bytes());
        out.push(u8::from(self.emergency_dek.is_some()));
        put_bytes32(&mut out, &self.policy.to_bytes());
        put_bytes32(&mut out, &self.wrapped_dek.to_bytes());
        if let Some(em) = &self.emergency_dek {
            put_bytes32(&mut out, &em.to_bytes());
        }
        out.extend_from_slice(&self.nonce);
        out
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = self.header_bytes();
        out.extend_from_slice(&(self.body.len() as u64).to_be_bytes());
        out.extend_from_slice(&self.body);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, AbeError> {
        let mut r = Reader::new(bytes);
        r.magic("HABE")?;
        r.version(FORMAT_VERSION)?;
        let doc_id = DocId(r.array()?);
        let has_emergency = match r.u8()? {
            0 => false,
            1 => true,
            other => {
                return Err(WireError::InvalidField {
                    field: "flags",
                    reason: format!("unknown value {other}"),
                }
                .into())
            }
        };
        let policy = PolicyTree::from_bytes(r.bytes32()?)?;
        let wrapped_dek = read_wrapped(r.bytes32()?)?;
        let emergency_dek = if has_emergency {
            Some(read_wrapped(r.bytes32()?)?)
        } else {
            None
        };
        let nonce = r.array()?;
        let body_len = r.u64()?;
        let body_len = usize::try_from(body_len).map_err(|_| WireError::InvalidField {
            field: "body length",
            reason: "does not fit in memory".into(),
        })?;
        let body = r.take(body_len)?.to_vec();
        r.finish()?;
        Ok(Self {
            doc_id,
            policy,
            wrapped_dek,
            emergency_dek,
            nonce,
            body,
        })
    }
}

fn read_wrapped(bytes: &[u8]) -> Result<WrappedKey, AbeError> {
    let mut r = Reader::new(bytes);
    let w = WrappedKey::read(&mut r)?;
    r.finish()?;
    Ok(w)
}

fn derive_dek(element: &Gt) -> Key {
    let mut encoded = Vec::new();
    put_point(&mut encoded, element);
    let digest = Sha256::new()
        .chain_update(DEK_DOMAIN)
        .chain_update(&encoded)
        .finalize();
    *Key::from_slice(&digest)
}

/// Generates a parameter pair from the operating system RNG.
pub fn setup(security_level: u16) -> Result<(PublicParams, MasterSecret), AbeError> {
    scheme::setup(security_level, &mut OsRng)
}

/// Deterministic setup for tests and reproducible fixtures.
pub fn setup_seeded(security_level: u16, seed: u64) -> Result<(PublicParams, MasterSecret), AbeError> {
    scheme::setup(security_level, &mut ChaCha20Rng::seed_from_u64(seed))
}

pub fn setup_with_rng<R: RngCore + CryptoRng>(
    security_level: u16,
    rng: &mut R,
) -> Result<(PublicParams, MasterSecret), AbeError> {
    scheme::setup(security_level, rng)
}

pub fn keygen(msk: &MasterSecret, attrs: &AttributeSet) -> Result<UserKey, AbeError> {
    keygen_with_rng(msk, attrs, &mut OsRng)
}

pub fn keygen_with_rng<R: RngCore + CryptoRng>(
    msk: &MasterSecret,
    attrs: &AttributeSet,
    rng: &mut R,
) -> Result<UserKey, AbeError> {
    if attrs.is_empty() {
        return Err(PolicyError::EmptyAttributeSet.into());
    }
    let key_id = KeyId::random_with(rng);
    let (root, components) = scheme::keygen(msk, attrs, rng);
    Ok(UserKey {
        key_id,
        attributes: attrs.clone(),
        root,
        components,
    })
}

pub fn encrypt(pp: &PublicParams, policy: &PolicyTree, plaintext: &[u8]) -> Result<EncryptedDocument, AbeError> {
    encrypt_with(pp, policy, plaintext, EncryptOptions::default(), &mut OsRng)
}

pub fn encrypt_with<R: RngCore + CryptoRng>(
    pp: &PublicParams,
    policy: &PolicyTree,
    plaintext: &[u8],
    options: EncryptOptions,
    rng: &mut R,
) -> Result<EncryptedDocument, AbeError> {
    if plaintext.is_empty() {
        return Err(AbeError::EmptyPlaintext);
    }
    let seed = scheme::random_element(pp, rng);
    let wrapped_dek = scheme::encrypt_element(pp, policy, seed, rng);
    let emergency_dek = options.emergency_access.then(|| {
        let leaf = PolicyTree::leaf(EMERGENCY_ATTRIBUTE).expect("valid constant attribute");
        scheme::encrypt_element(pp, &leaf, seed, rng)
    });
    let mut nonce = [0u8; NONCE_LEN];
    rng.fill_bytes(&mut nonce);
    let mut doc = EncryptedDocument {
        doc_id: DocId::random_with(rng),
        policy: policy.clone(),
        wrapped_dek,
        emergency_dek,
        nonce,
        body: Vec::new(),
    };
    let aad = doc.header_bytes();
    doc.body = ChaCha20Poly1305::new(&derive_dek(&seed))
        .encrypt(
            Nonce::from_slice(&nonce),
            Payload {
                msg: plaintext,
                aad: &aad,
            },
        )
        .expect("encryption of in-memory buffer");
    Ok(doc)
}

/// Opens `doc` when the key's attributes satisfy its policy.
pub fn decrypt(key: &UserKey, doc: &EncryptedDocument) -> Result<Vec<u8>, AbeError> {
    if !doc.policy.satisfied_by(&key.attributes) {
        return Err(AbeError::NotSatisfied);
    }
    let seed = scheme::decrypt_element(&doc.policy, &doc.wrapped_dek, &key.root, &key.components)?;
    open_body(doc, &seed)
}

/// Opens `doc` through its emergency wrap with a key holding
/// [`EMERGENCY_ATTRIBUTE`].
pub fn decrypt_emergency(key: &UserKey, doc: &EncryptedDocument) -> Result<Vec<u8>, AbeError> {
    let wrapped = doc.emergency_dek.as_ref().ok_or(AbeError::NoEmergencyWrap)?;
    let leaf = PolicyTree::leaf(EMERGENCY_ATTRIBUTE).expect("valid constant attribute");
    if !leaf.satisfied_by(&key.attributes) {
        return Err(AbeError::NotSatisfied);
    }
    let seed = scheme::decrypt_element(&leaf, wrapped, &key.root, &key.components)?;
    open_body(doc, &seed)
}

fn open_body(doc: &EncryptedDocument, seed: &Gt) -> Result<Vec<u8>, AbeError> {
    let aad = doc.header_bytes();
    ChaCha20Poly1305::new(&derive_dek(seed))
        .decrypt(
            Nonce::from_slice(&doc.nonce),
            Payload {
                msg: &doc.body,
                aad: &aad,
            },
        )
        .map_err(|_| AbeError::IntegrityFailure)
}
