//! Ciphertext-policy ABE over BLS12-381.
//!
//! Group assignment for the asymmetric pairing `e: G1 x G2 -> Gt`:
//!
//! | element                         | group |
//! |---------------------------------|-------|
//! | `h = g1^beta`                   | G1    |
//! | `e(g1, g2)^alpha`               | Gt    |
//! | key root `D = g2^((alpha+r)/beta)` | G2 |
//! | key `D_j = g2^r * H(j)^(r_j)`   | G2    |
//! | key `D'_j = g1^(r_j)`           | G1    |
//! | ciphertext `C = h^s`            | G1    |
//! | leaf `C_y = g1^(q_y(0))`        | G1    |
//! | leaf `C'_y = H(att)^(q_y(0))`   | G2    |
//!
//! `H` hashes attribute names onto G2 with a proper hash-to-curve map, so no
//! party knows the discrete log of `H(att)`. Each key's components are tied
//! together through its own `r`; mixing components of two keys leaves the
//! `e(g1,g2)^(r s)` blinding term inconsistent.

use std::collections::BTreeMap;

use ark_bls12_381::{g2::Config as G2Config, Bls12_381, Fr, G1Affine, G1Projective, G2Affine, G2Projective};
use ark_ec::hashing::curve_maps::wb::WBMap;
use ark_ec::hashing::map_to_curve_hasher::MapToCurveBasedHasher;
use ark_ec::hashing::HashToCurve;
use ark_ec::pairing::{Pairing, PairingOutput};
use ark_ec::{CurveGroup, PrimeGroup};
use ark_ff::{Field, UniformRand, Zero};
use rand::{CryptoRng, RngCore};
use sha2::Sha256;

use super::policy::{Attribute, AttributeSet, PolicyTree};
use super::AbeError;

pub type Gt = PairingOutput<Bls12_381>;

type AttributeHasher =
    MapToCurveBasedHasher<G2Projective, ark_ff::field_hashers::DefaultFieldHasher<Sha256, 128>, WBMap<G2Config>>;

const HASH_DOMAIN: &[u8] = b"HAB-CPABE-V1-ATTRIBUTE-TO-G2";

/// Bit strength provided by BLS12-381.
pub const SUPPORTED_SECURITY_LEVEL: u16 = 128;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PublicParams {
    pub security_level: u16,
    pub h: G1Affine,
    pub egg_alpha: Gt,
}

#[derive(Clone, PartialEq, Eq)]
pub struct MasterSecret {
    pub beta: Fr,
    pub g2_alpha: G2Affine,
}

impl std::fmt::Debug for MasterSecret {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str("MasterSecret(..)")
    }
}

/// Per-attribute key material.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct KeyComponent {
    pub d: G2Affine,
    pub d_prime: G1Affine,
}

/// The attribute-encrypted part of a document: a Gt element carrying the
/// data key seed, plus one component pair per policy leaf.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct WrappedKey {
    pub c_tilde: Gt,
    pub c: G1Affine,
    pub leaves: Vec<LeafCiphertext>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LeafCiphertext {
    pub c: G1Affine,
    pub c_prime: G2Affine,
}

pub fn hash_attribute(attr: &Attribute) -> G2Projective {
    let hasher = AttributeHasher::new(HASH_DOMAIN).expect("static hash-to-curve domain");
    hasher
        .hash(attr.as_str().as_bytes())
        .expect("hash-to-curve is total on byte strings")
        .into()
}

pub fn setup<R: RngCore + CryptoRng>(
    security_level: u16,
    rng: &mut R,
) -> Result<(PublicParams, MasterSecret), AbeError> {
    if security_level != SUPPORTED_SECURITY_LEVEL {
        return Err(AbeError::UnsupportedSecurityLevel(security_level));
    }
    let alpha = Fr::rand(rng);
    let beta = nonzero_scalar(rng);
    let g1 = G1Projective::generator();
    let g2 = G2Projective::generator();
    let pp = PublicParams {
        security_level,
        h: (g1 * beta).into_affine(),
        egg_alpha: Bls12_381::pairing(g1, g2) * alpha,
    };
    let msk = MasterSecret {
        beta,
        g2_alpha: (g2 * alpha).into_affine(),
    };
    Ok((pp, msk))
}

/// Returns the key root and one component per attribute.
pub fn keygen<R: RngCore + CryptoRng>(
    msk: &MasterSecret,
    attrs: &AttributeSet,
    rng: &mut R,
) -> (G2Affine, BTreeMap<Attribute, KeyComponent>) {
    let g1 = G1Projective::generator();
    let g2 = G2Projective::generator();
    let r = Fr::rand(rng);
    let g2_r = g2 * r;
    let beta_inv = msk.beta.inverse().expect("beta is nonzero");
    let root = ((G2Projective::from(msk.g2_alpha) + g2_r) * beta_inv).into_affine();
    let components = attrs
        .iter()
        .map(|attr| {
            let r_j = Fr::rand(rng);
            let component = KeyComponent {
                d: (g2_r + hash_attribute(attr) * r_j).into_affine(),
                d_prime: (g1 * r_j).into_affine(),
            };
            (attr.clone(), component)
        })
        .collect();
    (root, components)
}

/// Encrypts the Gt element `message` under `policy`.
pub fn encrypt_element<R: RngCore + CryptoRng>(
    pp: &PublicParams,
    policy: &PolicyTree,
    message: Gt,
    rng: &mut R,
) -> WrappedKey {
    let s = Fr::rand(rng);
    let mut leaves = Vec::with_capacity(policy.leaf_count());
    share_secret(policy, s, rng, &mut leaves);
    WrappedKey {
        c_tilde: message + pp.egg_alpha * s,
        c: (G1Projective::from(pp.h) * s).into_affine(),
        leaves,
    }
}

/// Random Gt element used as the seed of a fresh data key.
pub fn random_element<R: RngCore + CryptoRng>(pp: &PublicParams, rng: &mut R) -> Gt {
    pp.egg_alpha * nonzero_scalar(rng)
}

fn nonzero_scalar<R: RngCore + CryptoRng>(rng: &mut R) -> Fr {
    loop {
        let x = Fr::rand(rng);
        if !x.is_zero() {
            return x;
        }
    }
}

/// Top-down secret sharing over the tree: node `x` with threshold `k` gets a
/// random degree `k-1` polynomial with `q_x(0)` equal to the parent's share
/// at this child's 1-based index.
fn share_secret<R: RngCore + CryptoRng>(
    node: &PolicyTree,
    secret: Fr,
    rng: &mut R,
    out: &mut Vec<LeafCiphertext>,
) {
    match node {
        PolicyTree::Leaf(attr) => {
            let c = (G1Projective::generator() * secret).into_affine();
            let c_prime = (hash_attribute(attr) * secret).into_affine();
            out.push(LeafCiphertext { c, c_prime });
        }
        PolicyTree::Threshold { k, children } => {
            let mut coeffs = Vec::with_capacity(*k);
            coeffs.push(secret);
            coeffs.extend((1..*k).map(|_| Fr::rand(rng)));
            for (i, child) in children.iter().enumerate() {
                let x = Fr::from((i + 1) as u64);
                let share = coeffs.iter().rev().fold(Fr::zero(), |acc, c| acc * x + c);
                share_secret(child, share, rng, out);
            }
        }
    }
}

/// Recovers the Gt message. The caller has already established that `attrs`
/// structurally satisfy `policy`; a key whose components do not belong
/// together yields a wrong element rather than an error.
pub fn decrypt_element(
    policy: &PolicyTree,
    wrapped: &WrappedKey,
    root: &G2Affine,
    components: &BTreeMap<Attribute, KeyComponent>,
) -> Result<Gt, AbeError> {
    if wrapped.leaves.len() != policy.leaf_count() {
        return Err(AbeError::Malformed("leaf count does not match policy".into()));
    }
    let mut cursor = 0usize;
    let blinding = decrypt_node(policy, &wrapped.leaves, &mut cursor, components)
        .ok_or(AbeError::NotSatisfied)?;
    // e(C, D) = e(g1, g2)^(s(alpha + r)); dividing by e(g1, g2)^(r s) leaves
    // e(g1, g2)^(alpha s).
    let mask = Bls12_381::pairing(wrapped.c, *root) - blinding;
    Ok(wrapped.c_tilde - mask)
}

/// Returns `e(g1, g2)^(r * q_x(0))` for a satisfied node. `cursor` tracks
/// the position in the leaf list so skipped subtrees stay aligned.
fn decrypt_node(
    node: &PolicyTree,
    leaves: &[LeafCiphertext],
    cursor: &mut usize,
    components: &BTreeMap<Attribute, KeyComponent>,
) -> Option<Gt> {
    match node {
        PolicyTree::Leaf(attr) => {
            let leaf = &leaves[*cursor];
            *cursor += 1;
            let comp = components.get(attr)?;
            // e(C_y, D_j) / e(D'_j, C'_y) as one multi-pairing.
            let neg_d_prime = -G1Projective::from(comp.d_prime);
            Some(Bls12_381::multi_pairing(
                [G1Projective::from(leaf.c), neg_d_prime],
                [G2Projective::from(comp.d), G2Projective::from(leaf.c_prime)],
            ))
        }
        PolicyTree::Threshold { k, children } => {
            let mut chosen: Vec<(u64, Gt)> = Vec::with_capacity(*k);
            for (i, child) in children.iter().enumerate() {
                if chosen.len() == *k || !subtree_satisfiable(child, components) {
                    *cursor += child.leaf_count();
                    continue;
                }
                let value = decrypt_node(child, leaves, cursor, components)?;
                chosen.push(((i + 1) as u64, value));
            }
            if chosen.len() < *k {
                return None;
            }
            let xs: Vec<u64> = chosen.iter().map(|(x, _)| *x).collect();
            Some(
                chosen
                    .iter()
                    .map(|(x, v)| *v * lagrange_at_zero(*x, &xs))
                    .sum(),
            )
        }
    }
}

fn subtree_satisfiable(node: &PolicyTree, components: &BTreeMap<Attribute, KeyComponent>) -> bool {
    match node {
        PolicyTree::Leaf(attr) => components.contains_key(attr),
        PolicyTree::Threshold { k, children } => {
            children
                .iter()
                .filter(|c| subtree_satisfiable(c, components))
                .take(*k)
                .count()
                == *k
        }
    }
}

/// Lagrange basis coefficient for `x` over the point set `xs`, evaluated at 0.
fn lagrange_at_zero(x: u64, xs: &[u64]) -> Fr {
    let xi = Fr::from(x);
    xs.iter().filter(|&&j| j != x).fold(Fr::from(1u64), |acc, &j| {
        let xj = Fr::from(j);
        acc * xj * (xj - xi).inverse().expect("distinct interpolation points")
    })
}
