//! The verifier: replay both key chains from the initial state, check every
//! tag, and decide whether the damage looks like an ordinary crash.

use std::collections::HashSet;

use serde::Serialize;

use crate::crypto::{verify_tag, CfParams, Key256, Tag256};
use crate::log::format::lstore_records;
use crate::log::{parse_kstore, InitialState, KStoreSnapshot, KStoreState, KeyStep};

/// Inclusive range of ordinals; empty when `lo > hi`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct IndexInterval {
    pub lo: u64,
    pub hi: u64,
}

impl IndexInterval {
    pub fn is_empty(&self) -> bool {
        self.lo > self.hi
    }

    pub fn contains(&self, index: u64) -> bool {
        self.lo <= index && index <= self.hi
    }

    pub fn len(&self) -> u64 {
        if self.is_empty() {
            0
        } else {
            self.hi - self.lo + 1
        }
    }
}

/// Ordinals a normal crash may legitimately have damaged when `n_prime`
/// records survive: `[max(1, n'−cs+1), n'+cs]`.
pub fn expendable_set(n_prime: u64, cs: u64) -> IndexInterval {
    if cs == 0 {
        return IndexInterval { lo: n_prime + 1, hi: n_prime };
    }
    IndexInterval { lo: (n_prime + 1).saturating_sub(cs).max(1), hi: n_prime + cs }
}

/// One key per ordinal: the sequential key, or the state-controlled key plus
/// its randomizer when the choice function fired.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct KeySchedule {
    pub entries: Vec<KeyStep>,
}

impl KeySchedule {
    pub fn get(&self, index: u64) -> Option<&KeyStep> {
        let i = usize::try_from(index.checked_sub(1)?).ok()?;
        self.entries.get(i)
    }
}

/// State-controlled keys acceptable in the key store after a crash.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct CandidateKeySet {
    pub keys: HashSet<Key256>,
}

impl CandidateKeySet {
    pub fn contains(&self, key: &Key256) -> bool {
        self.keys.contains(key)
    }

    pub fn len(&self) -> usize {
        self.keys.len()
    }

    pub fn is_empty(&self) -> bool {
        self.keys.is_empty()
    }
}

/// Incremental replay of the device's key schedule, collecting the candidate
/// set once the surviving length is known.
struct Replay<'a> {
    chains: KStoreState,
    init: &'a InitialState,
    cf: CfParams,
}

impl<'a> Replay<'a> {
    fn new(init: &'a InitialState, cf: CfParams) -> Self {
        Replay { chains: KStoreState::genesis(init.k0.clone(), init.k0_prime.clone()), init, cf }
    }

    fn step(&mut self) -> KeyStep {
        self.chains.advance(&self.cf, &self.init.chi, &self.init.chi_prime)
    }

    /// Run ordinals `n'+1 ..= n'+cs`; must be called right after ordinal `n'`.
    fn candidates(mut self, cs: u64) -> CandidateKeySet {
        let mut keys = HashSet::new();
        keys.insert(self.chains.sc_key.clone());
        for _ in 0..cs {
            let step = self.step();
            if step.fired() {
                keys.insert(step.key);
            }
        }
        CandidateKeySet { keys }
    }
}

/// Rebuild the key schedule for ordinals `1..=n'+cs` and the candidate set
/// for a log store holding `n_prime` records.
pub fn reconstruct_keys(init: &InitialState, cf: CfParams, n_prime: u64, cs: u64) -> (KeySchedule, CandidateKeySet) {
    let mut replay = Replay::new(init, cf);
    let mut entries = Vec::with_capacity((n_prime + cs) as usize);
    for _ in 0..n_prime {
        entries.push(replay.step());
    }
    // Replay past n' for the schedule, then again inside `candidates` for K'.
    let mut tail = Replay { chains: replay.chains.clone(), init, cf };
    for _ in 0..cs {
        entries.push(tail.step());
    }
    (KeySchedule { entries }, replay.candidates(cs))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum RejectReason {
    /// The log store header was unreadable.
    MalformedLStore,
    /// The key store was unreadable.
    MalformedKStore,
    /// The key store's state-controlled key is not a candidate (includes an
    /// empty key store).
    KeyNotCandidate,
    /// Not even the initialization record verified.
    NothingVerified,
    /// An ordinal outside the expendable set failed verification.
    NonExpendableGap(u64),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Rejection {
    pub reason: RejectReason,
    pub n_prime: u64,
    pub verified: u64,
    pub expendable: IndexInterval,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct RecoveredLog {
    pub n_prime: u64,
    /// Verified `(ordinal, message)` pairs in ordinal order.
    pub pairs: Vec<(u64, Vec<u8>)>,
    pub expendable: IndexInterval,
    /// Expendable ordinals outside `expendable`, sorted. Empty for this
    /// scheme; the permuting baseline adds recently displaced entries.
    pub also_expendable: Vec<u64>,
}

impl RecoveredLog {
    pub fn is_expendable(&self, index: u64) -> bool {
        self.expendable.contains(index) || self.also_expendable.binary_search(&index).is_ok()
    }
}

/// Either ⊥ (untrusted) or the recovered events.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub enum RecoverResult {
    Untrusted(Rejection),
    Trusted(RecoveredLog),
}

impl RecoverResult {
    pub fn is_trusted(&self) -> bool {
        matches!(self, RecoverResult::Trusted(_))
    }

    pub fn pairs(&self) -> Option<&[(u64, Vec<u8>)]> {
        match self {
            RecoverResult::Trusted(log) => Some(&log.pairs),
            RecoverResult::Untrusted(_) => None,
        }
    }

    pub fn n_prime(&self) -> u64 {
        match self {
            RecoverResult::Trusted(log) => log.n_prime,
            RecoverResult::Untrusted(r) => r.n_prime,
        }
    }

    pub fn expendable(&self) -> IndexInterval {
        match self {
            RecoverResult::Trusted(log) => log.expendable,
            RecoverResult::Untrusted(r) => r.expendable,
        }
    }
}

/// Verify a (possibly crashed or tampered) log against the initial state.
/// All failures come back as [`RecoverResult::Untrusted`].
pub fn recover(lstore: &[u8], kstore: &[u8], init: &InitialState, cf: CfParams, cs: u64) -> RecoverResult {
    let reject = |reason, n_prime, verified| {
        RecoverResult::Untrusted(Rejection { reason, n_prime, verified, expendable: expendable_set(n_prime, cs) })
    };
    let Ok((records, _trailing)) = lstore_records(lstore) else {
        return reject(RejectReason::MalformedLStore, 0, 0);
    };
    let n_prime = records.len() as u64;
    let held = match parse_kstore(kstore) {
        Ok(KStoreSnapshot::Present(state)) => state.sc_key,
        Ok(KStoreSnapshot::Empty) => return reject(RejectReason::KeyNotCandidate, n_prime, 0),
        Err(_) => return reject(RejectReason::MalformedKStore, n_prime, 0),
    };

    let mut replay = Replay::new(init, cf);
    let mut pairs = Vec::with_capacity(records.len());
    for record in &records {
        let step = replay.step();
        if verify_tag(&step.key, record.message, step.randomizer.as_ref(), &Tag256(*record.tag)) {
            pairs.push((step.index, record.message.to_vec()));
        }
    }
    let candidates = replay.candidates(cs);
    let verified = pairs.len() as u64;
    let expendable = expendable_set(n_prime, cs);

    if !candidates.contains(&held) {
        return reject(RejectReason::KeyNotCandidate, n_prime, verified);
    }
    if pairs.is_empty() {
        return reject(RejectReason::NothingVerified, n_prime, verified);
    }
    // pairs is sorted by ordinal; walk it against 1..=n'.
    let mut next = pairs.iter().map(|(i, _)| *i).peekable();
    for index in 1..=n_prime {
        if next.peek() == Some(&index) {
            next.next();
        } else if !expendable.contains(index) {
            return reject(RejectReason::NonExpendableGap(index), n_prime, verified);
        }
    }
    RecoverResult::Trusted(RecoveredLog { n_prime, pairs, expendable, also_expendable: Vec::new() })
}
