//! Baseline: an encrypt-and-permute crash-tolerant log.
//!
//! Each entry is encrypted and MACed under an evolving key, tagged with a
//! PRF sorting key, and written at a PRG-chosen slot of a growing array. The
//! entry that used to sit there moves to the end. The verifier replays the
//! coins to learn which entries a crash may have touched. It keeps no state
//! the verifier can check against, which is why rewinding goes unnoticed.

use std::collections::{HashMap, HashSet};

use aes::Aes256;
use ctr::cipher::{KeyIvInit, StreamCipher};
use thiserror::Error;

use crate::crypto::{compute_tag, evolve_key, prf, verify_tag, Key256, Tag256, Tweak, KEY_LEN};
use crate::recovery::{expendable_set, RecoverResult, RecoveredLog, RejectReason, Rejection};

type Aes256Ctr = ctr::Ctr128BE<Aes256>;

pub const SLIC_MAGIC: [u8; 4] = *b"SLIC";
pub const SLIC_VERSION: u16 = 1;
const HEADER_LEN: usize = 6;
const ENTRY_OVERHEAD: usize = 4 + 2 * KEY_LEN;

#[derive(Debug, Error)]
pub enum SlicError {
    #[error("at least one dummy entry is required")]
    NoDummies,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SlicEntry {
    pub ciphertext: Vec<u8>,
    pub tag: Tag256,
    pub sort_key: [u8; KEY_LEN],
}

/// The logger's state. `count` includes the dummies.
#[derive(Debug, Clone)]
pub struct SlicState {
    key: Key256,
    seed: Key256,
    chi: Tweak,
    chi_prime: Tweak,
    pub entries: Vec<SlicEntry>,
    pub count: u64,
}

/// What the verifier keeps from setup.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SlicInit {
    pub k0: Key256,
    pub seed0: Key256,
    pub chi: Tweak,
    pub chi_prime: Tweak,
    pub lambda: u64,
}

impl SlicInit {
    /// Message stored as dummy number `i` (1-based).
    pub fn dummy(i: u64) -> Vec<u8> {
        format!("dummy-{i}").into_bytes()
    }
}

fn key_from(seed: &[u8; KEY_LEN], label: &[u8]) -> [u8; KEY_LEN] {
    prf(seed, &[b"slic/gen/", label])
}

/// Slot in `[1, g]` for the `g`-th entry, by rejection sampling on PRF output.
fn position(seed: &Key256, g: u64) -> u64 {
    let zone = u64::MAX - u64::MAX % g;
    let mut ctr = 0u64;
    loop {
        let out = prf(&seed.0, &[b"pos", &ctr.to_be_bytes()]);
        let x = u64::from_be_bytes(out[..8].try_into().expect("8 bytes"));
        if x < zone {
            return x % g + 1;
        }
        ctr += 1;
    }
}

fn sort_key(key: &Key256, g: u64) -> [u8; KEY_LEN] {
    prf(&key.0, &[b"sort", &g.to_be_bytes()])
}

fn apply_keystream(key: &Key256, g: u64, data: &mut [u8]) {
    let mut iv = [0u8; 16];
    iv[..8].copy_from_slice(&g.to_be_bytes());
    Aes256Ctr::new(&key.0.into(), &iv.into()).apply_keystream(data);
}

pub fn slic_gen(seed: &[u8; KEY_LEN], lambda: u64) -> Result<(SlicState, SlicInit), SlicError> {
    if lambda == 0 {
        return Err(SlicError::NoDummies);
    }
    let init = SlicInit {
        k0: Key256(key_from(seed, b"k0")),
        seed0: Key256(key_from(seed, b"seed0")),
        chi: Tweak(key_from(seed, b"chi")),
        chi_prime: Tweak(key_from(seed, b"chi-prime")),
        lambda,
    };
    let mut state = SlicState {
        key: init.k0.clone(),
        seed: init.seed0.clone(),
        chi: init.chi,
        chi_prime: init.chi_prime,
        entries: Vec::with_capacity(lambda as usize),
        count: 0,
    };
    for i in 1..=lambda {
        slic_log(&mut state, &SlicInit::dummy(i));
    }
    Ok((state, init))
}

impl SlicState {
    /// Slot the next appended entry will be written to.
    pub fn next_position(&self) -> u64 {
        position(&self.seed, self.count + 1)
    }
}

/// Append one event.
pub fn slic_log(state: &mut SlicState, message: &[u8]) {
    let g = state.count + 1;
    let mut ciphertext = message.to_vec();
    apply_keystream(&state.key, g, &mut ciphertext);
    let tag = compute_tag(&state.key, &ciphertext, None);
    let entry = SlicEntry { ciphertext, tag, sort_key: sort_key(&state.key, g) };
    let pos = position(&state.seed, g);
    state.entries.push(entry);
    let last = state.entries.len() - 1;
    if pos != g {
        state.entries.swap(pos as usize - 1, last);
    }
    state.key = evolve_key(&state.key, &state.chi);
    state.seed = evolve_key(&state.seed, &state.chi_prime);
    state.count = g;
}

/// Slot layout after `count` entries: element `s` is the ordinal at slot `s+1`.
pub fn replay_layout(init: &SlicInit, count: u64) -> Vec<u64> {
    let mut seed = init.seed0.clone();
    let mut layout = Vec::with_capacity(count as usize);
    for g in 1..=count {
        let pos = position(&seed, g) as usize;
        layout.push(g);
        layout.swap(pos - 1, g as usize - 1);
        seed = evolve_key(&seed, &init.chi_prime);
    }
    layout
}

pub fn serialize_slic(entries: &[SlicEntry]) -> Vec<u8> {
    let mut out =
        Vec::with_capacity(HEADER_LEN + entries.iter().map(|e| ENTRY_OVERHEAD + e.ciphertext.len()).sum::<usize>());
    out.extend_from_slice(&SLIC_MAGIC);
    out.extend_from_slice(&SLIC_VERSION.to_be_bytes());
    for e in entries {
        out.extend_from_slice(&(e.ciphertext.len() as u32).to_be_bytes());
        out.extend_from_slice(&e.ciphertext);
        out.extend_from_slice(&e.tag.0);
        out.extend_from_slice(&e.sort_key);
    }
    out
}

/// Parse complete entries; `None` when the header is wrong.
pub fn parse_slic(bytes: &[u8]) -> Option<Vec<SlicEntry>> {
    if bytes.len() < HEADER_LEN || bytes[..4] != SLIC_MAGIC || bytes[4..6] != SLIC_VERSION.to_be_bytes() {
        return None;
    }
    let mut entries = Vec::new();
    let mut rest = &bytes[HEADER_LEN..];
    while rest.len() >= 4 {
        let len = u32::from_be_bytes(rest[..4].try_into().expect("4 bytes")) as usize;
        if rest.len() < ENTRY_OVERHEAD + len {
            break;
        }
        let ciphertext = rest[4..4 + len].to_vec();
        let tag = Tag256(rest[4 + len..4 + len + KEY_LEN].try_into().expect("32 bytes"));
        let sort_key = rest[4 + len + KEY_LEN..ENTRY_OVERHEAD + len].try_into().expect("32 bytes");
        entries.push(SlicEntry { ciphertext, tag, sort_key });
        rest = &rest[ENTRY_OVERHEAD + len..];
    }
    Some(entries)
}

/// Verify a serialized array. Pair ordinals count the dummies, so the first
/// real event is ordinal `λ+1`.
pub fn slic_recover(bytes: &[u8], init: &SlicInit, cs: u64) -> RecoverResult {
    let Some(entries) = parse_slic(bytes) else {
        return RecoverResult::Untrusted(Rejection {
            reason: RejectReason::MalformedLStore,
            n_prime: 0,
            verified: 0,
            expendable: expendable_set(0, cs),
        });
    };
    let n_prime = entries.len() as u64;
    let horizon = n_prime + cs;

    // Replay the key chain and the swap sequence up to the latest plausible event.
    let mut key = init.k0.clone();
    let mut seed = init.seed0.clone();
    let mut keys = Vec::with_capacity(horizon as usize);
    let mut by_sort_key = HashMap::with_capacity(horizon as usize);
    // slot -> ordinal currently stored there
    let mut layout: Vec<u64> = Vec::with_capacity(horizon as usize);
    let window_lo = n_prime.saturating_sub(cs).max(1);
    let mut expendable: HashSet<u64> = (window_lo..=horizon).collect();
    for g in 1..=horizon {
        by_sort_key.insert(sort_key(&key, g), g);
        keys.push(key.clone());
        let pos = position(&seed, g);
        layout.push(g);
        if pos != g {
            let displaced = layout[pos as usize - 1];
            layout.swap(pos as usize - 1, g as usize - 1);
            if g >= window_lo {
                expendable.insert(displaced);
            }
        }
        key = evolve_key(&key, &init.chi);
        seed = evolve_key(&seed, &init.chi_prime);
    }

    let mut pairs = Vec::new();
    for e in &entries {
        let Some(&g) = by_sort_key.get(&e.sort_key) else { continue };
        let k = &keys[g as usize - 1];
        if verify_tag(k, &e.ciphertext, None, &e.tag) {
            let mut plain = e.ciphertext.clone();
            apply_keystream(k, g, &mut plain);
            pairs.push((g, plain));
        }
    }
    pairs.sort_by_key(|(g, _)| *g);
    pairs.dedup_by_key(|(g, _)| *g);
    let verified = pairs.len() as u64;
    let interval = crate::recovery::IndexInterval { lo: window_lo, hi: horizon };
    let reject = |reason| RecoverResult::Untrusted(Rejection { reason, n_prime, verified, expendable: interval });

    if verified + cs < init.lambda {
        return reject(RejectReason::NothingVerified);
    }
    let recovered: HashSet<u64> = pairs.iter().map(|(g, _)| *g).collect();
    for g in 1..=n_prime.saturating_sub(cs) {
        if !recovered.contains(&g) && !expendable.contains(&g) {
            return reject(RejectReason::NonExpendableGap(g));
        }
    }
    let mut also_expendable: Vec<u64> = expendable.into_iter().filter(|g| !interval.contains(*g)).collect();
    also_expendable.sort_unstable();
    RecoverResult::Trusted(RecoveredLog { n_prime, pairs, expendable: interval, also_expendable })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn logged(seed: u8, lambda: u64, n: u64) -> (SlicState, SlicInit) {
        let (mut s, init) = slic_gen(&[seed; 32], lambda).unwrap();
        for i in 0..n {
            slic_log(&mut s, format!("event {i}").as_bytes());
        }
        (s, init)
    }

    #[test]
    fn needs_dummies() {
        assert!(slic_gen(&[0; 32], 0).is_err());
        let (s, _) = slic_gen(&[0; 32], 1).unwrap();
        assert_eq!(s.entries.len(), 1);
    }

    #[test]
    fn gen_is_deterministic() {
        let (a, ia) = logged(1, 32, 10);
        let (b, ib) = logged(1, 32, 10);
        assert_eq!(ia, ib);
        assert_eq!(a.entries, b.entries);
    }

    #[test]
    fn dummies_round_trip() {
        let (s, init) = slic_gen(&[2; 32], 1 << 10).unwrap();
        let r = slic_recover(&serialize_slic(&s.entries), &init, 16);
        let pairs = r.pairs().unwrap();
        assert_eq!(pairs.len(), 1 << 10);
        assert!(pairs.iter().all(|(g, m)| *m == SlicInit::dummy(*g)));
    }

    #[test]
    fn events_round_trip() {
        for seed in 0..20u8 {
            let (s, init) = logged(seed, 16, 300);
            let r = slic_recover(&serialize_slic(&s.entries), &init, 8);
            let pairs = r.pairs().unwrap();
            assert_eq!(pairs.len(), 316);
            for (g, m) in &pairs[16..] {
                assert_eq!(m, format!("event {}", g - 17).as_bytes());
            }
        }
    }

    #[test]
    fn seeds_give_different_permutations() {
        for seed in 0..100u8 {
            let a = logged(seed, 8, 40).0;
            let b = logged(seed.wrapping_add(100), 8, 40).0;
            let order = |s: &SlicState, init: &SlicInit| {
                let r = slic_recover(&serialize_slic(&s.entries), init, 0);
                assert!(r.is_trusted());
                // recover the slot order by sorting-key lookup
                let mut key = init.k0.clone();
                let mut map = HashMap::new();
                for g in 1..=s.count {
                    map.insert(sort_key(&key, g), g);
                    key = evolve_key(&key, &init.chi);
                }
                s.entries.iter().map(|e| map[&e.sort_key]).collect::<Vec<_>>()
            };
            let ia = slic_gen(&[seed; 32], 8).unwrap().1;
            let ib = slic_gen(&[seed.wrapping_add(100); 32], 8).unwrap().1;
            assert_ne!(order(&a, &ia), order(&b, &ib));
        }
    }

    #[test]
    fn append_without_swap_when_the_last_slot_is_drawn() {
        // g = 1 always lands on slot 1.
        assert_eq!(position(&Key256([7; 32]), 1), 1);
        let (s, init) = slic_gen(&[3; 32], 1).unwrap();
        assert_eq!(s.entries[0].sort_key, sort_key(&init.k0, 1));
    }

    #[test]
    fn position_stays_in_range() {
        let mut seed = Key256([9; 32]);
        for g in 1..5000 {
            let p = position(&seed, g);
            assert!((1..=g).contains(&p));
            seed = evolve_key(&seed, &Tweak([1; 32]));
        }
    }

    #[test]
    fn truncation_is_detected() {
        let mut caught = 0;
        for seed in 0..50u8 {
            let (s, init) = logged(seed, 64, 400);
            let cut = &s.entries[..s.entries.len() - 40];
            if !slic_recover(&serialize_slic(cut), &init, 8).is_trusted() {
                caught += 1;
            }
        }
        assert!(caught >= 45, "{caught}");
    }

    #[test]
    fn rewind_to_an_old_array_is_accepted() {
        let (mut s, init) = logged(4, 64, 100);
        let old = serialize_slic(&s.entries);
        for i in 0..200 {
            slic_log(&mut s, format!("later {i}").as_bytes());
        }
        let r = slic_recover(&old, &init, 8);
        assert_eq!(r.pairs().unwrap().len(), 164);
    }

    #[test]
    fn tampered_entry_is_untrusted_or_dropped() {
        let (s, init) = logged(5, 16, 100);
        let mut entries = s.entries.clone();
        entries[3].ciphertext[0] ^= 1;
        assert!(!slic_recover(&serialize_slic(&entries), &init, 4).is_trusted());
        assert!(parse_slic(b"SLIX\0\x01").is_none());
    }
}
