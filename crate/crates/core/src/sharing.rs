//! T-of-N Shamir sharing of byte strings over GF(256).
//!
//! Every input byte gets its own random polynomial of degree `t - 1` whose
//! constant term is the byte; share `i` holds the evaluations at `x = i`.
//! Payloads are therefore exactly as long as the input.

use std::collections::HashSet;

use rand::rngs::OsRng;
use rand::RngCore;
use thiserror::Error;

use crate::ids::BlobId;
use crate::wire::{Reader, WireError};

pub const MAX_SHARES: usize = 255;
const SHARE_MAGIC: &str = "HABS";
const SHARE_VERSION: u8 = 1;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum SharingError {
    #[error("threshold {t} and share count {n} must satisfy 1 <= t <= n <= 255")]
    InvalidParameters { n: usize, t: usize },
    #[error("cannot split empty data")]
    EmptyData,
    #[error("{have} shares supplied, {need} required")]
    InsufficientShares { have: usize, need: usize },
    #[error("shares belong to different files")]
    LabelMismatch,
    #[error("shares disagree on threshold, count or length")]
    InconsistentParams,
    #[error("duplicate x coordinate {0}")]
    DuplicateX(u8),
    #[error(transparent)]
    Wire(#[from] WireError),
}

/// One labeled share. `share_id` doubles as the evaluation point.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Share {
    pub file_id: BlobId,
    pub share_id: u8,
    pub threshold: u8,
    pub total: u8,
    pub payload: Vec<u8>,
}

impl Share {
    pub fn x_coordinate(&self) -> u8 {
        self.share_id
    }

    /// The stored object format: magic, version, file id, share id, T, N,
    /// big-endian u64 payload length, payload.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(32 + self.payload.len());
        out.extend_from_slice(SHARE_MAGIC.as_bytes());
        out.push(SHARE_VERSION);
        out.extend_from_slice(self.file_id.as_bytes());
        out.push(self.share_id);
        out.push(self.threshold);
        out.push(self.total);
        out.extend_from_slice(&(self.payload.len() as u64).to_be_bytes());
        out.extend_from_slice(&self.payload);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, SharingError> {
        let mut r = Reader::new(bytes);
        r.magic(SHARE_MAGIC)?;
        r.version(SHARE_VERSION)?;
        let file_id = BlobId(r.array()?);
        let share_id = r.u8()?;
        let threshold = r.u8()?;
        let total = r.u8()?;
        let len = r.u64()?;
        let len = usize::try_from(len).map_err(|_| WireError::InvalidField {
            field: "payload length",
            reason: "too large".into(),
        })?;
        let payload = r.take(len)?.to_vec();
        r.finish()?;
        if share_id == 0 || threshold == 0 || threshold > total || share_id > total {
            return Err(SharingError::InconsistentParams);
        }
        Ok(Share {
            file_id,
            share_id,
            threshold,
            total,
            payload,
        })
    }
}

pub fn split(file_id: BlobId, data: &[u8], n: usize, t: usize) -> Result<Vec<Share>, SharingError> {
    split_with_rng(file_id, data, n, t, &mut OsRng)
}

pub fn split_with_rng<R: RngCore + ?Sized>(
    file_id: BlobId,
    data: &[u8],
    n: usize,
    t: usize,
    rng: &mut R,
) -> Result<Vec<Share>, SharingError> {
    if t == 0 || t > n || n > MAX_SHARES {
        return Err(SharingError::InvalidParameters { n, t });
    }
    if data.is_empty() {
        return Err(SharingError::EmptyData);
    }
    let degree = t - 1;
    // coefficients[j * len + b] is the degree-(j+1) coefficient for byte b.
    let mut coefficients = vec![0u8; degree * data.len()];
    rng.fill_bytes(&mut coefficients);

    let mut shares = Vec::with_capacity(n);
    for x in 1..=n as u8 {
        let mut payload = vec![0u8; data.len()];
        // Horner from the highest coefficient down.
        for j in (0..degree).rev() {
            let row = &coefficients[j * data.len()..(j + 1) * data.len()];
            for (acc, &c) in payload.iter_mut().zip(row) {
                *acc = gf::mul(*acc, x) ^ c;
            }
        }
        for (acc, &secret) in payload.iter_mut().zip(data) {
            *acc = gf::mul(*acc, x) ^ secret;
        }
        shares.push(Share {
            file_id,
            share_id: x,
            threshold: t as u8,
            total: n as u8,
            payload,
        });
    }
    Ok(shares)
}

/// Reconstructs the original bytes from at least `t` consistent shares.
/// Fewer than `t` shares is an error; there is no partial output.
pub fn combine(shares: &[Share], t: usize) -> Result<Vec<u8>, SharingError> {
    if t == 0 || shares.len() < t {
        return Err(SharingError::InsufficientShares {
            have: shares.len(),
            need: t.max(1),
        });
    }
    let first = &shares[0];
    let mut seen = HashSet::new();
    for s in shares {
        if s.file_id != first.file_id {
            return Err(SharingError::LabelMismatch);
        }
        if s.threshold != first.threshold
            || s.total != first.total
            || s.payload.len() != first.payload.len()
            || usize::from(s.threshold) != t
            || s.share_id == 0
        {
            return Err(SharingError::InconsistentParams);
        }
        if !seen.insert(s.share_id) {
            return Err(SharingError::DuplicateX(s.share_id));
        }
    }

    let used = &shares[..t];
    let xs: Vec<u8> = used.iter().map(Share::x_coordinate).collect();
    // In characteristic 2, (0 - x_j) / (x_i - x_j) = x_j / (x_i ^ x_j).
    let basis: Vec<u8> = xs
        .iter()
        .map(|&xi| {
            xs.iter()
                .filter(|&&xj| xj != xi)
                .fold(1u8, |acc, &xj| gf::mul(acc, gf::div(xj, xi ^ xj)))
        })
        .collect();

    let mut out = vec![0u8; first.payload.len()];
    for (share, &l) in used.iter().zip(&basis) {
        for (acc, &y) in out.iter_mut().zip(&share.payload) {
            *acc ^= gf::mul(l, y);
        }
    }
    Ok(out)
}

/// GF(2^8) arithmetic modulo x^8 + x^4 + x^3 + x + 1 via log tables.
pub(crate) mod gf {
    const fn tables() -> ([u8; 512], [u8; 256]) {
        let mut exp = [0u8; 512];
        let mut log = [0u8; 256];
        let mut x: u16 = 1;
        let mut i = 0;
        while i < 255 {
            exp[i] = x as u8;
            log[x as usize] = i as u8;
            // multiply by the generator 3 = x + 1
            x ^= x << 1;
            if x & 0x100 != 0 {
                x ^= 0x11b;
            }
            i += 1;
        }
        while i < 512 {
            exp[i] = exp[i - 255];
            i += 1;
        }
        (exp, log)
    }

    const TABLES: ([u8; 512], [u8; 256]) = tables();
    const EXP: [u8; 512] = TABLES.0;
    const LOG: [u8; 256] = TABLES.1;

    #[inline]
    pub fn mul(a: u8, b: u8) -> u8 {
        if a == 0 || b == 0 {
            return 0;
        }
        EXP[LOG[a as usize] as usize + LOG[b as usize] as usize]
    }

    #[inline]
    pub fn div(a: u8, b: u8) -> u8 {
        assert!(b != 0, "division by zero in GF(256)");
        if a == 0 {
            return 0;
        }
        EXP[LOG[a as usize] as usize + 255 - LOG[b as usize] as usize]
    }
}
