//! Closed-form success bounds and brute-force oracles for the truncation
//! attack.

use thiserror::Error;

use crate::crypto::CfVariant;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum BoundError {
    #[error("the uniform bound needs cs > m (got m={m}, cs={cs})")]
    CacheNotAboveRate { m: u64, cs: u64 },
    #[error("m must be at least 1")]
    ZeroRate,
    #[error("enumeration over {0} positions is too large")]
    TooLarge(u64),
}

/// `(1−1/m)^ℓ / (⌊cs/m⌋+1)`
pub fn bound_truncate(m: u64, cs: u64, ell: u64) -> f64 {
    assert!(m >= 1, "m must be at least 1");
    let survive = (ell as f64 * (-1.0 / m as f64).ln_1p()).exp();
    survive / ((cs / m) as f64 + 1.0)
}

/// `(m−ℓ)/(m+cs)` for `ℓ < m`, else 0. Only defined for `cs > m`.
pub fn bound_uniform(m: u64, cs: u64, ell: u64) -> Result<f64, BoundError> {
    if m == 0 {
        return Err(BoundError::ZeroRate);
    }
    if cs <= m {
        return Err(BoundError::CacheNotAboveRate { m, cs });
    }
    Ok(if ell < m { (m - ell) as f64 / (m + cs) as f64 } else { 0.0 })
}

/// Success probability bound for an adversary that leaves `n_prime` of `n`
/// records after removing `ell` beyond the cache.
pub fn theorem_f(n: u64, n_prime: u64, ell: u64, cs: u64, m: u64, eps_prf: f64, variant: CfVariant) -> f64 {
    if n_prime < 1 {
        return 0.0;
    }
    match variant {
        CfVariant::HashThreshold => eps_prf.max(bound_truncate(m, cs, ell)),
        CfVariant::Uniform => {
            if n_prime >= n.saturating_sub(cs + ell) {
                if ell < m {
                    (m - ell) as f64 / (m + cs) as f64
                } else {
                    0.0
                }
            } else {
                eps_prf
            }
        }
    }
}

/// Probability of every evolution pattern over `len` positions, each firing
/// independently with probability `p`, passed with its fire count.
fn for_each_pattern(len: u64, p: f64, mut f: impl FnMut(u64, f64)) -> Result<(), BoundError> {
    if len > 24 {
        return Err(BoundError::TooLarge(len));
    }
    for bits in 0u64..1 << len {
        let k = u64::from(bits.count_ones());
        f(bits, p.powi(k as i32) * (1.0 - p).powi((len - k) as i32));
    }
    Ok(())
}

/// Enumerate evolution patterns over the `cs+ℓ` truncated positions, add up
/// the two intersecting cases (no evolution at all; some evolution in the
/// first `cs` and none in the last `ℓ`), and divide by the average candidate
/// set size `⌊cs/m⌋+1`.
pub fn case_enumeration(m: u64, cs: u64, ell: u64) -> Result<f64, BoundError> {
    if m == 0 {
        return Err(BoundError::ZeroRate);
    }
    if cs + ell > 24 {
        return Err(BoundError::TooLarge(cs + ell));
    }
    let p = 1.0 / m as f64;
    let mut p1 = 0.0;
    let mut p2 = 0.0;
    let head_mask = (1u64 << cs) - 1;
    for_each_pattern(cs + ell, p, |bits, prob| {
        let head = bits & head_mask;
        let tail = bits >> cs;
        if bits == 0 {
            p1 += prob;
        } else if head != 0 && tail == 0 {
            p2 += prob;
        }
    })?;
    Ok((p1 + p2) / ((cs / m) as f64 + 1.0))
}

/// Exact success probability when the held key is uniform over the
/// candidate set at compromise: patterns over the last `ℓ` stored positions
/// and the `cs` positions after them.
pub fn exact_truncate_uniform_key(m: u64, cs: u64, ell: u64) -> Result<f64, BoundError> {
    if m == 0 {
        return Err(BoundError::ZeroRate);
    }
    if cs + ell > 24 {
        return Err(BoundError::TooLarge(cs + ell));
    }
    let p = 1.0 / m as f64;
    let tail_mask = (1u64 << ell) - 1;
    let mut total = 0.0;
    for_each_pattern(ell + cs, p, |bits, prob| {
        if bits & tail_mask == 0 {
            let later = u64::from((bits >> ell).count_ones());
            total += prob / (later + 1) as f64;
        }
    })?;
    Ok(total)
}

/// Exact success probability of the harness's truncation game with the
/// hash-threshold choice function. The device is `u` events ahead of the
/// log store, `u` uniform in `[0, cs)`, and the attack wins iff no
/// evolution happened in the last `ℓ+u` events and something beyond the
/// expendable set was removed.
pub fn game_truncate_probability(m: u64, cs: u64, ell: u64) -> f64 {
    assert!(m >= 1 && cs >= 1);
    let q = 1.0 - 1.0 / m as f64;
    let sum: f64 = (0..cs).filter(|u| ell + u > 0).map(|u| q.powf((ell + u) as f64)).sum();
    sum / cs as f64
}

/// Exact success probability of the harness's truncation game with the
/// uniform choice function, for a device that logged `1 + events + u`
/// events with `u` uniform in `[0, cs)`. Each aligned window fires at an
/// independent uniform offset, so the held key survives an interval with
/// probability `Π (1 − covered/m)` over the windows it touches.
pub fn game_truncate_probability_uniform(m: u64, cs: u64, ell: u64, events: u64) -> f64 {
    assert!(m >= 1 && cs >= 1);
    let survive = |first: u64, last: u64| {
        let mut p = 1.0;
        let mut i = first;
        while i <= last {
            let window_end = ((i - 1) / m + 1) * m;
            let covered = window_end.min(last) - i + 1;
            p *= 1.0 - covered as f64 / m as f64;
            i = window_end + 1;
        }
        p
    };
    let mut sum = 0.0;
    for u in 0..cs {
        let n = 1 + events + u;
        let pending = n % cs;
        if ell + pending == 0 {
            continue;
        }
        let stored = n - pending;
        sum += survive(stored - ell + 1, n);
    }
    sum / cs as f64
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn uniform_game_probability_hand_cases() {
        // m = 1 fires every event, so any non-empty interval kills the key.
        assert_eq!(game_truncate_probability_uniform(1, 4, 2, 20), 0.0);
        // Past a full window of ℓ the key never survives.
        assert_eq!(game_truncate_probability_uniform(64, 256, 64, 2 * 256 + 64 + 64), 0.0);
        // m = 2, cs = 2, ℓ = 0: only the odd-N half has a pending record, and
        // that single event covers half of its window.
        assert!((game_truncate_probability_uniform(2, 2, 0, 7) - 0.25).abs() < 1e-15);
    }

    #[test]
    fn truncate_examples() {
        assert!((bound_truncate(64, 256, 0) - 0.2).abs() < 1e-15);
        let e = bound_truncate(1 << 14, 1 << 14, 1 << 14);
        assert!((e - 0.183_934_107_048_167_5).abs() < 1e-12, "{e}");
        assert!((e - 0.1840).abs() < 1e-4);
        let mut last = f64::INFINITY;
        for ell in 0..500 {
            let b = bound_truncate(32, 64, ell);
            assert!(b < last);
            last = b;
        }
        assert_eq!(bound_truncate(1, 10, 1), 0.0);
        assert!((bound_truncate(16, 16, 0) - 0.5).abs() < 1e-15);
    }

    #[test]
    fn uniform_examples() {
        assert_eq!(bound_uniform(64, 256, 64), Ok(0.0));
        assert!((bound_uniform(64, 256, 0).unwrap() - 0.2).abs() < 1e-15);
        assert!((bound_uniform(64, 256, 32).unwrap() - 0.1).abs() < 1e-15);
        assert_eq!(bound_uniform(64, 64, 0), Err(BoundError::CacheNotAboveRate { m: 64, cs: 64 }));
    }

    #[test]
    fn combined_bound_cases() {
        assert_eq!(theorem_f(100, 0, 5, 10, 4, 0.3, CfVariant::HashThreshold), 0.0);
        assert_eq!(theorem_f(1000, 500, 3, 256, 64, 0.0, CfVariant::HashThreshold), bound_truncate(64, 256, 3));
        assert_eq!(theorem_f(1000, 500, 3, 256, 64, 0.9, CfVariant::HashThreshold), 0.9);
        assert_eq!(theorem_f(1000, 100, 3, 256, 64, 1e-9, CfVariant::Uniform), 1e-9);
        assert_eq!(theorem_f(1000, 741, 3, 256, 64, 1e-9, CfVariant::Uniform), 61.0 / 320.0);
    }

    #[test]
    fn case_enumeration_reproduces_closed_form() {
        for ell in 0..=2 {
            let e = case_enumeration(4, 8, ell).unwrap();
            assert!((e - bound_truncate(4, 8, ell)).abs() < 1e-12, "ell={ell}");
        }
    }

    #[test]
    fn exact_forms_are_consistent() {
        // E[1/(1+Bin(cs,p))] = (1 − (1−p)^(cs+1)) / ((cs+1)p)
        let (m, cs) = (4u64, 8u64);
        let p = 0.25f64;
        let closed = (1.0 - (1.0 - p).powi(cs as i32 + 1)) / ((cs + 1) as f64 * p);
        for ell in 0..=2 {
            let e = exact_truncate_uniform_key(m, cs, ell).unwrap();
            assert!((e - closed * (1.0 - p).powi(ell as i32)).abs() < 1e-12);
        }
        assert!(exact_truncate_uniform_key(4, 30, 0).is_err());
    }

    #[test]
    fn game_probability_limits() {
        // m = 1 evolves on every event, so only ℓ = u = 0 could win.
        assert_eq!(game_truncate_probability(1, 8, 0), 0.0);
        let g = game_truncate_probability(1 << 30, 4, 0);
        assert!((g - 0.75).abs() < 1e-6);
    }
}
