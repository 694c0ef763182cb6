//! Fault injection: what a device looks like after an ordinary power loss.
//!
//! A crash loses up to `cs` trailing records, the cache plus at worst the
//! tail of the last flush, and may leave a torn record at the boundary.
//! A key whose update was being committed at the crash moment may be lost.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use thiserror::Error;

use crate::log::format::{encode_record, lstore_header, KSTORE_SC_KEY, KSTORE_SEQ_KEY};
use crate::log::{gen, serialize_kstore, DeviceState, InitMeta, LogConfig, LogError};

/// Fewest episodes [`stability_estimate`] will run.
pub const MIN_STABILITY_TRIALS: u64 = 1000;

#[derive(Debug, Error)]
pub enum CrashError {
    #[error("alpha must lie in [0, 1], got {0}")]
    InvalidAlpha(f64),
    #[error("at least {MIN_STABILITY_TRIALS} trials are required, got {0}")]
    TooFewTrials(u64),
    #[error(transparent)]
    Log(#[from] LogError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct CrashParams {
    /// Probability that a key with an update in flight is lost.
    pub alpha: f64,
    /// Most records a crash can lose.
    pub cs: u64,
    pub rng_seed: u64,
}

impl CrashParams {
    pub fn new(alpha: f64, cs: u64, rng_seed: u64) -> Result<Self, CrashError> {
        if !(0.0..=1.0).contains(&alpha) {
            return Err(CrashError::InvalidAlpha(alpha));
        }
        Ok(CrashParams { alpha, cs, rng_seed })
    }
}

/// On-disk bytes left behind by a crash, plus what the crash did.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CrashedState {
    pub lstore_bytes: Vec<u8>,
    pub kstore_bytes: Vec<u8>,
    /// Trailing records lost, including a torn one.
    pub dropped: u64,
    /// The first lost record was partially written.
    pub torn: bool,
    pub sc_key_lost: bool,
    pub seq_key_lost: bool,
}

impl CrashedState {
    /// Complete records still on disk.
    pub fn surviving(&self, total: u64) -> u64 {
        total - self.dropped
    }
}

/// Crash `state` right after its latest event. Deterministic in
/// `params.rng_seed`.
pub fn normal_crash(state: &DeviceState, params: &CrashParams) -> CrashedState {
    let mut rng = ChaCha8Rng::seed_from_u64(params.rng_seed);
    let records: Vec<_> = state.all_records().collect();
    let total = records.len() as u64;
    // The initialization record is written through before gen returns.
    let max_drop = params.cs.min(total.saturating_sub(1));
    let dropped = rng.random_range(0..=max_drop);
    let keep = (total - dropped) as usize;

    let mut lstore_bytes = lstore_header().to_vec();
    for r in &records[..keep] {
        encode_record(&mut lstore_bytes, r);
    }
    let mut torn = false;
    if dropped > 0 && rng.random_bool(0.5) {
        let mut partial = Vec::new();
        encode_record(&mut partial, records[keep]);
        let written = rng.random_range(1..partial.len());
        lstore_bytes.extend_from_slice(&partial[..written]);
        torn = true;
    }

    let mut kstore_bytes = serialize_kstore(&state.kstore);
    let sc_in_flight = state.cache.key_update_in_flight.is_some();
    // Every event evolves the sequential key, so it is always mid-update.
    let seq_in_flight = state.last_index() > 0;
    let sc_key_lost = sc_in_flight && rng.random_bool(params.alpha);
    let seq_key_lost = seq_in_flight && rng.random_bool(params.alpha);
    if sc_key_lost {
        kstore_bytes[KSTORE_SC_KEY].fill(0);
    }
    if seq_key_lost {
        kstore_bytes[KSTORE_SEQ_KEY].fill(0);
    }
    CrashedState { lstore_bytes, kstore_bytes, dropped, torn, sc_key_lost, seq_key_lost }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct StabilityReport {
    pub trials: u64,
    pub both_lost: u64,
    pub sc_lost: u64,
    pub seq_lost: u64,
    pub empirical: f64,
    /// `α²/m`
    pub theoretical: f64,
    /// Binomial standard deviation of `empirical` around `theoretical`.
    pub sigma: f64,
}

/// Run `trials` log-then-crash episodes and count how often both keys vanish.
/// Each episode logs a uniform number of events in `[1, 4m]` on a fresh log
/// and crashes after the last one.
pub fn stability_estimate(config: LogConfig, params: &CrashParams, trials: u64) -> Result<StabilityReport, CrashError> {
    if trials < MIN_STABILITY_TRIALS {
        return Err(CrashError::TooFewTrials(trials));
    }
    CrashParams::new(params.alpha, params.cs, params.rng_seed)?;
    let m = config.cf.m;
    let mut rng = ChaCha8Rng::seed_from_u64(params.rng_seed);
    let (mut both_lost, mut sc_lost, mut seq_lost) = (0, 0, 0);
    for _ in 0..trials {
        let seed: [u8; 32] = rng.random();
        let (mut device, _) = gen(&seed, config, &InitMeta::default())?;
        let events = rng.random_range(1..=4 * m.max(1));
        for i in 0..events {
            device.log_event(&i.to_be_bytes())?;
        }
        let crashed = normal_crash(&device, &CrashParams { rng_seed: rng.random(), ..*params });
        sc_lost += u64::from(crashed.sc_key_lost);
        seq_lost += u64::from(crashed.seq_key_lost);
        both_lost += u64::from(crashed.sc_key_lost && crashed.seq_key_lost);
    }
    let theoretical = params.alpha * params.alpha / m as f64;
    Ok(StabilityReport {
        trials,
        both_lost,
        sc_lost,
        seq_lost,
        empirical: both_lost as f64 / trials as f64,
        theoretical,
        sigma: (theoretical * (1.0 - theoretical) / trials as f64).sqrt(),
    })
}
