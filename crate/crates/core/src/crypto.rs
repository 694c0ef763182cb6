//! Keyed primitives shared by the logger and the verifier.
//!
//! Everything here is a pure function of its inputs. HMAC-SHA-256 serves as
//! both the PRF that evolves keys and the per-entry MAC; SHA-256 drives the
//! hash-threshold choice function.

use std::fmt;

use hmac::{Hmac, Mac};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

type HmacSha256 = Hmac<Sha256>;

/// Byte length shared by all key material.
pub const KEY_LEN: usize = 32;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum CryptoError {
    #[error("choice-function rate parameter m must be at least 1")]
    ZeroRate,
}

/// A 256-bit secret. Lives in the key store, never in log records.
#[derive(Clone, PartialEq, Eq, Hash, Default)]
pub struct Key256(pub [u8; KEY_LEN]);

impl Key256 {
    pub const ZERO: Key256 = Key256([0u8; KEY_LEN]);

    pub fn as_bytes(&self) -> &[u8; KEY_LEN] {
        &self.0
    }

    pub fn is_zero(&self) -> bool {
        self.0.iter().all(|b| *b == 0)
    }
}

impl fmt::Debug for Key256 {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        // Only a short fingerprint; keys should not end up in logs verbatim.
        write!(f, "Key256({:02x}{:02x}..)", self.0[0], self.0[1])
    }
}

/// Public per-log constant fed to the PRF when a chain evolves.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Default)]
pub struct Tweak(pub [u8; KEY_LEN]);

/// MAC output attached to every log record.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Default)]
pub struct Tag256(pub [u8; KEY_LEN]);

fn hmac(key: &[u8], parts: &[&[u8]]) -> [u8; KEY_LEN] {
    let mut mac = HmacSha256::new_from_slice(key).expect("HMAC accepts any key length");
    for part in parts {
        mac.update(part);
    }
    mac.finalize().into_bytes().into()
}

/// Raw PRF evaluation under a 32-byte key; used for seed expansion and
/// domain-separated derivations.
pub fn prf(key: &[u8; KEY_LEN], parts: &[&[u8]]) -> [u8; KEY_LEN] {
    hmac(key, parts)
}

/// One step of a key chain: `k_next = PRF_k(tweak)`.
pub fn evolve_key(key: &Key256, tweak: &Tweak) -> Key256 {
    Key256(hmac(&key.0, &[&tweak.0]))
}

/// Tag a message. With a randomizer the MAC input is `message ∥ randomizer`.
pub fn compute_tag(key: &Key256, message: &[u8], randomizer: Option<&Key256>) -> Tag256 {
    match randomizer {
        Some(r) => Tag256(hmac(&key.0, &[message, &r.0])),
        None => Tag256(hmac(&key.0, &[message])),
    }
}

/// Constant-time tag check.
pub fn verify_tag(key: &Key256, message: &[u8], randomizer: Option<&Key256>, tag: &Tag256) -> bool {
    let mut mac = HmacSha256::new_from_slice(&key.0).expect("HMAC accepts any key length");
    mac.update(message);
    if let Some(r) = randomizer {
        mac.update(&r.0);
    }
    mac.verify_slice(&tag.0).is_ok()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CfVariant {
    /// Fires when `SHA-256(k' ∥ index) < T`.
    HashThreshold,
    /// Fires exactly once per aligned window of `m` indices.
    Uniform,
}

/// `floor(2^256 / m)` as a 257-bit big-endian integer. The extra leading byte
/// only matters for `m = 1`, where the threshold is `2^256` itself.
#[derive(Clone, Copy, PartialEq, Eq, Hash)]
pub struct Threshold([u8; KEY_LEN + 1]);

impl Threshold {
    pub fn for_rate(m: u64) -> Result<Self, CryptoError> {
        if m == 0 {
            return Err(CryptoError::ZeroRate);
        }
        // Schoolbook long division of 1·256^32 by m, one byte at a time.
        let mut dividend = [0u8; KEY_LEN + 1];
        dividend[0] = 1;
        let mut quotient = [0u8; KEY_LEN + 1];
        let mut rem: u128 = 0;
        for (q, d) in quotient.iter_mut().zip(dividend.iter()) {
            rem = (rem << 8) | u128::from(*d);
            *q = (rem / u128::from(m)) as u8;
            rem %= u128::from(m);
        }
        Ok(Threshold(quotient))
    }

    pub fn to_be_bytes(&self) -> [u8; KEY_LEN + 1] {
        self.0
    }

    /// True iff the big-endian value of `digest` is strictly below the threshold.
    pub fn exceeds(&self, digest: &[u8; KEY_LEN]) -> bool {
        if self.0[0] != 0 {
            return true;
        }
        digest.as_slice() < &self.0[1..]
    }
}

impl fmt::Debug for Threshold {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Threshold(0x")?;
        for b in self.0 {
            write!(f, "{b:02x}")?;
        }
        write!(f, ")")
    }
}

/// Choice-function configuration: which variant and the expected spacing `m`
/// between state-controlled evolutions.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct CfParams {
    pub variant: CfVariant,
    pub m: u64,
    pub threshold: Threshold,
}

impl CfParams {
    pub fn new(variant: CfVariant, m: u64) -> Result<Self, CryptoError> {
        Ok(CfParams { variant, m, threshold: Threshold::for_rate(m)? })
    }

    pub fn hash_threshold(m: u64) -> Result<Self, CryptoError> {
        Self::new(CfVariant::HashThreshold, m)
    }

    pub fn uniform(m: u64) -> Result<Self, CryptoError> {
        Self::new(CfVariant::Uniform, m)
    }

    /// Zero-based window holding a 1-based event ordinal.
    pub fn window_of(&self, index: u64) -> u64 {
        (index - 1) / self.m
    }

    /// Decide whether the state-controlled key evolves at `index`.
    ///
    /// `evolutions_so_far` is the number of state-controlled evolutions over
    /// ordinals `1..index`. The uniform variant needs it to know whether the
    /// current window already fired, in which case `k_prime` is no longer the
    /// window-start key and the answer is false.
    pub fn fires(&self, k_prime: &Key256, index: u64, evolutions_so_far: u64) -> bool {
        match self.variant {
            CfVariant::HashThreshold => cf_hash(k_prime, index, self),
            CfVariant::Uniform => evolutions_so_far <= self.window_of(index) && cf_uniform(k_prime, index, self),
        }
    }
}

/// Hash-threshold choice function: `SHA-256(k' ∥ BE64(index)) < T`.
pub fn cf_hash(k_prime: &Key256, index: u64, params: &CfParams) -> bool {
    debug_assert_eq!(params.variant, CfVariant::HashThreshold);
    let mut h = Sha256::new();
    h.update(k_prime.0);
    h.update(index.to_be_bytes());
    let digest: [u8; KEY_LEN] = h.finalize().into();
    params.threshold.exceeds(&digest)
}

/// Offset in `0..m` at which window `window` fires, derived from the key held
/// when the window opened. Rejection sampling keeps the offset unbiased.
pub fn uniform_offset(window_key: &Key256, window: u64, m: u64) -> u64 {
    if m == 1 {
        return 0;
    }
    let limit = (u64::MAX / m) * m;
    let mut counter: u64 = 0;
    loop {
        let out = hmac(&window_key.0, &[b"cf-uniform", &window.to_be_bytes(), &counter.to_be_bytes()]);
        for chunk in out.chunks_exact(8) {
            let v = u64::from_be_bytes(chunk.try_into().expect("8-byte chunk"));
            if v < limit {
                return v % m;
            }
        }
        counter += 1;
    }
}

/// Uniform choice function, evaluated with the key held at the start of the
/// index's window.
pub fn cf_uniform(k_prime: &Key256, index: u64, params: &CfParams) -> bool {
    debug_assert_eq!(params.variant, CfVariant::Uniform);
    let window = params.window_of(index);
    let offset = (index - 1) % params.m;
    uniform_offset(k_prime, window, params.m) == offset
}
