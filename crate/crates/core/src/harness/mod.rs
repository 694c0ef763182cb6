//! The adaptive crash-integrity game.
//!
//! Per trial the adversary logs events, watching the log store and cache
//! after every operation. It then compromises the device and applies a
//! strategy, after which a crash wipes the cache. The challenger recovers,
//! and the adversary wins if the recovered log is trusted and either
//! something outside the expendable set was altered or lost, or the log
//! matches an earlier snapshot that a crash cannot explain.

pub mod bounds;
pub mod scheme;

use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::recovery::RecoverResult;

pub use bounds::{bound_truncate, bound_uniform, theorem_f, BoundError};
pub use scheme::{DoubleKey, Scheme, Slic};

/// Bytes per adversary-chosen event.
const MESSAGE_LEN: usize = 16;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum KStoreAction {
    Keep,
    Erase,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum AttackStrategy {
    /// Drop the last `cs+ℓ` stored records and leave the key store alone.
    TruncateKeepKey { ell: u64 },
    /// Restore the log store observed right after ordinal `target`.
    RewindToQueried { target: u64, kstore: KStoreAction },
    /// Flip one byte of event `index`.
    ModifyRecord { index: u64 },
    /// Remove every record.
    TotalDeletion,
}

impl AttackStrategy {
    pub fn label(&self) -> String {
        match self {
            AttackStrategy::TruncateKeepKey { .. } => "truncate_keep_key".into(),
            AttackStrategy::RewindToQueried { kstore: KStoreAction::Keep, .. } => "rewind_keep_key".into(),
            AttackStrategy::RewindToQueried { kstore: KStoreAction::Erase, .. } => "rewind_erase_key".into(),
            AttackStrategy::ModifyRecord { .. } => "modify_record".into(),
            AttackStrategy::TotalDeletion => "total_deletion".into(),
        }
    }

    fn ell(&self) -> Option<u64> {
        match self {
            AttackStrategy::TruncateKeepKey { ell } => Some(*ell),
            _ => None,
        }
    }
}

/// Whether the adversary sees intermediate states.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum AdversaryMode {
    Adaptive,
    /// Only the state at compromise is visible. A rewind degrades to
    /// truncating the final log store to the target length.
    NonAdaptive,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GameConfig {
    /// Events the adversary logs before compromise, on top of setup. Each
    /// trial adds a uniform `[0, cs)` extra so the compromise lands at a
    /// random offset within the flush cycle.
    pub events: u64,
    pub mode: AdversaryMode,
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum HarnessError {
    #[error("trials must be at least 1")]
    NoTrials,
    #[error("cache size must be at least 1")]
    ZeroCache,
    #[error("{events} events is too few for this strategy (need at least {needed})")]
    TooFewEvents { events: u64, needed: u64 },
    #[error("ordinal {index} must lie in [{lo}, {hi}]")]
    OutOfRange { index: u64, lo: u64, hi: u64 },
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrialReport {
    pub strategy: String,
    pub m: Option<u64>,
    pub cs: u64,
    pub ell: Option<u64>,
    pub trials: u64,
    pub successes: u64,
    pub empirical: f64,
    pub theoretical: Option<f64>,
    /// `sqrt(p(1−p)/trials)` with `p` the theoretical value when known,
    /// otherwise the empirical one.
    pub sigma: f64,
    pub scheme: String,
    pub mode: AdversaryMode,
}

impl TrialReport {
    /// `|empirical − theoretical|` in units of sigma. Infinite when sigma is
    /// zero and the two differ.
    pub fn deviation(&self) -> Option<f64> {
        let t = self.theoretical?;
        let gap = (self.empirical - t).abs();
        Some(if gap == 0.0 { 0.0 } else { gap / self.sigma })
    }

    pub fn within_sigmas(&self, k: f64) -> Option<bool> {
        self.deviation().map(|d| d <= k)
    }
}

/// Binomial standard deviation of a rate estimate.
pub fn binomial_sigma(p: f64, trials: u64) -> f64 {
    (p * (1.0 - p) / trials as f64).sqrt()
}

fn chain_step(prev: &[u8; 32], message: &[u8]) -> [u8; 32] {
    let mut h = Sha256::new();
    h.update(prev);
    h.update((message.len() as u64).to_be_bytes());
    h.update(message);
    h.finalize().into()
}

fn validate<S: Scheme>(
    scheme: &S,
    strategy: &AttackStrategy,
    config: &GameConfig,
    prefix: u64,
) -> Result<(), HarnessError> {
    let cs = scheme.cs();
    if cs == 0 {
        return Err(HarnessError::ZeroCache);
    }
    let last = prefix + config.events;
    match *strategy {
        AttackStrategy::TruncateKeepKey { ell } => {
            let needed = 2 * cs + ell + 1;
            if config.events < needed {
                return Err(HarnessError::TooFewEvents { events: config.events, needed });
            }
        }
        AttackStrategy::RewindToQueried { target, .. } => {
            // Something past the rewound state's expendable set must be lost.
            let hi = last.saturating_sub(cs + 1);
            if target < prefix || target > hi {
                return Err(HarnessError::OutOfRange { index: target, lo: prefix, hi });
            }
        }
        AttackStrategy::ModifyRecord { index } => {
            let hi = last.saturating_sub(2 * cs);
            if index < 1 || index > hi {
                return Err(HarnessError::OutOfRange { index, lo: 1, hi });
            }
        }
        AttackStrategy::TotalDeletion => {}
    }
    Ok(())
}

/// One trial; returns whether the adversary won.
fn play<S: Scheme>(scheme: &S, strategy: &AttackStrategy, config: &GameConfig, rng: &mut ChaCha8Rng) -> bool {
    let cs = scheme.cs();
    let (mut device, verifier, prefix) = scheme.setup(&rng.random());
    let mut messages = prefix;
    let mut chain = vec![[0u8; 32]];
    for m in &messages {
        let next = chain_step(chain.last().expect("non-empty"), m);
        chain.push(next);
    }
    let adaptive = config.mode == AdversaryMode::Adaptive;
    let mut snapshot: Option<(Vec<u8>, u64)> = None;
    let observe_target = |ordinal: u64, device: &S::Device, snapshot: &mut Option<(Vec<u8>, u64)>| {
        if let AttackStrategy::RewindToQueried { target, .. } = *strategy {
            if adaptive && ordinal == target {
                let stored = scheme.stored(device);
                *snapshot = Some((scheme.lstore_prefix(device, stored), stored));
            }
        }
    };
    observe_target(messages.len() as u64, &device, &mut snapshot);

    let total = messages.len() as u64 + config.events + rng.random_range(0..cs);
    while (messages.len() as u64) < total {
        let msg: [u8; MESSAGE_LEN] = rng.random();
        scheme.log(&mut device, &msg);
        messages.push(msg.to_vec());
        let next = chain_step(chain.last().expect("non-empty"), &msg);
        chain.push(next);
        observe_target(messages.len() as u64, &device, &mut snapshot);
    }

    // Compromise, tamper, crash. The crash loses whatever sat in the cache.
    let stored = scheme.stored(&device);
    let kstore = scheme.kstore(&device);
    let mut modified = Vec::new();
    let (lstore, kstore, kept) = match *strategy {
        AttackStrategy::TruncateKeepKey { ell } => {
            let keep = stored.saturating_sub(cs + ell);
            (scheme.lstore_prefix(&device, keep), kstore, keep)
        }
        AttackStrategy::RewindToQueried { target, kstore: action } => {
            let (bytes, kept) = match snapshot.take() {
                Some(s) => s,
                None => {
                    let keep = target.min(stored);
                    (scheme.lstore_prefix(&device, keep), keep)
                }
            };
            let k = match action {
                KStoreAction::Keep => kstore,
                KStoreAction::Erase => Vec::new(),
            };
            (bytes, k, kept)
        }
        AttackStrategy::ModifyRecord { index } => {
            modified.push(index);
            (scheme.modify(&device, index, rng), kstore, stored)
        }
        AttackStrategy::TotalDeletion => (scheme.lstore_prefix(&device, 0), kstore, 0),
    };

    let result = scheme.recover(&lstore, &kstore, &verifier);
    let RecoverResult::Trusted(log) = result else {
        return false;
    };
    let recovered: HashMap<u64, &[u8]> = log.pairs.iter().map(|(i, m)| (*i, m.as_slice())).collect();

    for &index in &modified {
        if log.is_expendable(index) {
            continue;
        }
        match recovered.get(&index) {
            Some(m) if *m == messages[index as usize - 1].as_slice() => {}
            _ => return true,
        }
    }
    // Everything past what the adversary left behind was deleted.
    if ((kept + 1)..=total).any(|i| !log.is_expendable(i) && !recovered.contains_key(&i)) {
        return true;
    }
    // Rewind clause: the recovered sequence equals an earlier observation
    // from further back than a crash can reach.
    let j = log.pairs.len() as u64;
    if j + cs < total && log.pairs.iter().enumerate().all(|(k, (i, _))| *i == k as u64 + 1) {
        let mut h = [0u8; 32];
        for (_, m) in &log.pairs {
            h = chain_step(&h, m);
        }
        if h == chain[j as usize] {
            return true;
        }
    }
    false
}

/// Whether [`run_game`] accepts this strategy and configuration.
pub fn check_game<S: Scheme>(scheme: &S, strategy: &AttackStrategy, config: &GameConfig) -> Result<(), HarnessError> {
    let (_, _, prefix) = scheme.setup(&[0; 32]);
    validate(scheme, strategy, config, prefix.len() as u64)
}

/// Play `trials` independent games. Trial `t` draws from stream `t` of a
/// ChaCha8 generator seeded with `rng_seed`, so results do not depend on
/// scheduling.
pub fn run_game<S: Scheme>(
    scheme: &S,
    strategy: AttackStrategy,
    config: GameConfig,
    trials: u64,
    rng_seed: u64,
) -> Result<TrialReport, HarnessError> {
    if trials == 0 {
        return Err(HarnessError::NoTrials);
    }
    check_game(scheme, &strategy, &config)?;
    let successes: u64 = (0..trials)
        .into_par_iter()
        .map(|t| {
            let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
            rng.set_stream(t);
            u64::from(play(scheme, &strategy, &config, &mut rng))
        })
        .sum();
    let empirical = successes as f64 / trials as f64;
    let theoretical = scheme.theoretical(&strategy, &config);
    Ok(TrialReport {
        strategy: strategy.label(),
        m: scheme.rate(),
        cs: scheme.cs(),
        ell: strategy.ell(),
        trials,
        successes,
        empirical,
        theoretical,
        sigma: binomial_sigma(theoretical.unwrap_or(empirical), trials),
        scheme: scheme.name().into(),
        mode: config.mode,
    })
}

#[cfg(test)]
mod tests {
    use super::bounds::{game_truncate_probability, game_truncate_probability_uniform};
    use super::*;
    use crate::crypto::CfParams;

    fn ours(m: u64, cs: u64) -> DoubleKey {
        DoubleKey::new(CfParams::hash_threshold(m).unwrap(), cs)
    }

    fn adaptive(events: u64) -> GameConfig {
        GameConfig { events, mode: AdversaryMode::Adaptive }
    }

    #[test]
    fn rejects_bad_configurations() {
        let s = ours(4, 8);
        assert_eq!(run_game(&s, AttackStrategy::TotalDeletion, adaptive(10), 0, 1), Err(HarnessError::NoTrials));
        assert_eq!(
            run_game(&s, AttackStrategy::TruncateKeepKey { ell: 2 }, adaptive(18), 1, 1),
            Err(HarnessError::TooFewEvents { events: 18, needed: 19 })
        );
        assert!(run_game(&s, AttackStrategy::ModifyRecord { index: 40 }, adaptive(50), 1, 1).is_err());
        assert!(run_game(&s, AttackStrategy::ModifyRecord { index: 0 }, adaptive(50), 1, 1).is_err());
        let rewind = AttackStrategy::RewindToQueried { target: 43, kstore: KStoreAction::Keep };
        assert!(run_game(&s, rewind, adaptive(50), 1, 1).is_err());
    }

    #[test]
    fn report_is_deterministic() {
        let s = ours(4, 8);
        let a = run_game(&s, AttackStrategy::TruncateKeepKey { ell: 1 }, adaptive(40), 300, 5).unwrap();
        let b = run_game(&s, AttackStrategy::TruncateKeepKey { ell: 1 }, adaptive(40), 300, 5).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn report_json_fields() {
        let r = run_game(&ours(4, 8), AttackStrategy::TotalDeletion, adaptive(20), 10, 1).unwrap();
        let v = serde_json::to_value(&r).unwrap();
        for key in ["strategy", "m", "cs", "ell", "trials", "successes", "empirical", "theoretical", "sigma"] {
            assert!(v.get(key).is_some(), "{key}");
        }
        assert_eq!(v["strategy"], "total_deletion");
    }

    #[test]
    fn total_deletion_never_wins() {
        let r = run_game(&ours(8, 8), AttackStrategy::TotalDeletion, adaptive(20), 2000, 2).unwrap();
        assert_eq!(r.successes, 0);
    }

    #[test]
    fn modification_never_wins() {
        for s in [ours(4, 8), DoubleKey::new(CfParams::uniform(4).unwrap(), 8)] {
            let r = run_game(&s, AttackStrategy::ModifyRecord { index: 5 }, adaptive(40), 2000, 3).unwrap();
            assert_eq!(r.successes, 0);
        }
        let r = run_game(&Slic { lambda: 8, cs: 8 }, AttackStrategy::ModifyRecord { index: 12 }, adaptive(40), 500, 3)
            .unwrap();
        assert_eq!(r.successes, 0);
    }

    #[test]
    fn truncation_matches_exact_game_probability() {
        // Small parameters so the exact form is checked tightly.
        let (m, cs) = (4, 8);
        for ell in 0..=2 {
            let r = run_game(&ours(m, cs), AttackStrategy::TruncateKeepKey { ell }, adaptive(40), 20_000, 11 + ell)
                .unwrap();
            let p = game_truncate_probability(m, cs, ell);
            let sd = binomial_sigma(p, r.trials);
            assert!((r.empirical - p).abs() <= 3.0 * sd, "ell={ell}: {} vs {p}", r.empirical);
        }
    }

    #[test]
    fn uniform_truncation_matches_exact_game_probability() {
        let (m, cs) = (4, 8);
        for (ell, events) in [(0, 40), (2, 40), (3, 41)] {
            let scheme = DoubleKey::new(CfParams::uniform(m).unwrap(), cs);
            let r =
                run_game(&scheme, AttackStrategy::TruncateKeepKey { ell }, adaptive(events), 20_000, 21 + ell).unwrap();
            let p = game_truncate_probability_uniform(m, cs, ell, events);
            let sd = binomial_sigma(p, r.trials);
            assert!((r.empirical - p).abs() <= 3.0 * sd, "ell={ell}: {} vs {p}", r.empirical);
        }
    }

    #[test]
    fn rewind_breaks_slic_but_not_double_key() {
        let cs = 8;
        let target = 8 + 30;
        let rewind = AttackStrategy::RewindToQueried { target, kstore: KStoreAction::Erase };
        let r = run_game(&Slic { lambda: 8, cs }, rewind, adaptive(60), 500, 4).unwrap();
        assert_eq!(r.successes, 500);
        let rewind = AttackStrategy::RewindToQueried { target: 31, kstore: KStoreAction::Erase };
        let r = run_game(&ours(4, cs), rewind, adaptive(60), 500, 4).unwrap();
        assert_eq!(r.successes, 0);
    }

    #[test]
    fn adaptive_dominates_non_adaptive() {
        let cs = 8;
        let cases: Vec<(AttackStrategy, u64)> = vec![
            (AttackStrategy::RewindToQueried { target: 38, kstore: KStoreAction::Erase }, 60),
            (AttackStrategy::TruncateKeepKey { ell: 1 }, 40),
        ];
        for (strategy, events) in cases {
            let slic = Slic { lambda: 8, cs };
            let a = run_game(&slic, strategy, adaptive(events), 300, 9).unwrap();
            let n = run_game(&slic, strategy, GameConfig { events, mode: AdversaryMode::NonAdaptive }, 300, 9).unwrap();
            assert!(a.successes >= n.successes, "{strategy:?}");
            let a = run_game(&ours(4, cs), strategy, adaptive(events), 300, 9).unwrap();
            let n = run_game(&ours(4, cs), strategy, GameConfig { events, mode: AdversaryMode::NonAdaptive }, 300, 9)
                .unwrap();
            assert!(a.successes >= n.successes, "{strategy:?}");
        }
    }

    #[test]
    fn slic_truncation_is_mostly_caught() {
        let r = run_game(&Slic { lambda: 16, cs: 8 }, AttackStrategy::TruncateKeepKey { ell: 8 }, adaptive(80), 300, 6)
            .unwrap();
        assert!(r.empirical < 0.2, "{r:?}");
    }
}
