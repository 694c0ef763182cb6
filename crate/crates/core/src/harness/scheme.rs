//! Adapters that let the game drive either logging scheme.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::bounds::{bound_truncate, bound_uniform};
use super::{AdversaryMode, AttackStrategy, GameConfig};
use crate::crypto::{CfParams, CfVariant};
use crate::log::format::lstore_records;
use crate::log::{gen, serialize_kstore, serialize_lstore, DeviceState, InitMeta, InitialState, LogConfig};
use crate::recovery::{recover, RecoverResult};
use crate::slic::{replay_layout, serialize_slic, slic_gen, slic_log, slic_recover, SlicInit, SlicState};

/// What the game needs from a scheme. Ordinals are the scheme's own,
/// starting at 1 with whatever setup logs.
pub trait Scheme: Sync {
    type Device;
    type Verifier;

    fn name(&self) -> &'static str;
    fn cs(&self) -> u64;
    /// Choice-function spacing, if the scheme has one.
    fn rate(&self) -> Option<u64>;

    /// Fresh device and verifier secret. Also returns the messages setup logged.
    fn setup(&self, seed: &[u8; 32]) -> (Self::Device, Self::Verifier, Vec<Vec<u8>>);
    fn log(&self, device: &mut Self::Device, message: &[u8]);

    /// Records currently in the log store (not the cache).
    fn stored(&self, device: &Self::Device) -> u64;
    /// Log store bytes holding only the first `keep` stored records.
    fn lstore_prefix(&self, device: &Self::Device, keep: u64) -> Vec<u8>;
    fn kstore(&self, device: &Self::Device) -> Vec<u8>;
    /// Log store bytes with one byte of event `index`'s stored form flipped.
    fn modify(&self, device: &Self::Device, index: u64, rng: &mut ChaCha8Rng) -> Vec<u8>;

    fn recover(&self, lstore: &[u8], kstore: &[u8], verifier: &Self::Verifier) -> RecoverResult;

    /// The bound this attack should hit, when one applies.
    fn theoretical(&self, strategy: &AttackStrategy, config: &GameConfig) -> Option<f64>;
}

/// The double evolving key scheme.
#[derive(Debug, Clone, Copy)]
pub struct DoubleKey {
    pub cf: CfParams,
    pub cs: u64,
}

impl DoubleKey {
    pub fn new(cf: CfParams, cs: u64) -> Self {
        DoubleKey { cf, cs }
    }

    fn truncation_bound(&self, ell: u64) -> Option<f64> {
        match self.cf.variant {
            CfVariant::HashThreshold => Some(bound_truncate(self.cf.m, self.cs, ell)),
            CfVariant::Uniform => bound_uniform(self.cf.m, self.cs, ell).ok(),
        }
    }
}

impl Scheme for DoubleKey {
    type Device = DeviceState;
    type Verifier = InitialState;

    fn name(&self) -> &'static str {
        "double_key"
    }

    fn cs(&self) -> u64 {
        self.cs
    }

    fn rate(&self) -> Option<u64> {
        Some(self.cf.m)
    }

    fn setup(&self, seed: &[u8; 32]) -> (DeviceState, InitialState, Vec<Vec<u8>>) {
        let config = LogConfig { cf: self.cf, cs: self.cs as usize };
        let (device, init) = gen(seed, config, &InitMeta::default()).expect("cache size checked by the game");
        let prefix = vec![init.init_message.clone()];
        (device, init, prefix)
    }

    fn log(&self, device: &mut DeviceState, message: &[u8]) {
        device.log_event(message).expect("in-memory sink");
    }

    fn stored(&self, device: &DeviceState) -> u64 {
        device.lstore.len() as u64
    }

    fn lstore_prefix(&self, device: &DeviceState, keep: u64) -> Vec<u8> {
        serialize_lstore(&device.lstore[..keep as usize])
    }

    fn kstore(&self, device: &DeviceState) -> Vec<u8> {
        serialize_kstore(&device.kstore)
    }

    fn modify(&self, device: &DeviceState, index: u64, rng: &mut ChaCha8Rng) -> Vec<u8> {
        let mut bytes = device.serialize_lstore();
        let (records, _) = lstore_records(&bytes).expect("own serialization");
        if let Some(r) = records.get(index as usize - 1) {
            let at = r.offset + 4 + rng.random_range(0..r.message.len().max(1));
            let flip = rng.random_range(1..=255u8);
            bytes[at] ^= flip;
        }
        bytes
    }

    fn recover(&self, lstore: &[u8], kstore: &[u8], verifier: &InitialState) -> RecoverResult {
        recover(lstore, kstore, verifier, self.cf, self.cs)
    }

    fn theoretical(&self, strategy: &AttackStrategy, config: &GameConfig) -> Option<f64> {
        match *strategy {
            AttackStrategy::TruncateKeepKey { ell } => self.truncation_bound(ell),
            AttackStrategy::RewindToQueried { target, .. } => {
                let n = 1 + config.events;
                self.truncation_bound(n.saturating_sub(target + self.cs))
            }
            AttackStrategy::ModifyRecord { .. } | AttackStrategy::TotalDeletion => Some(0.0),
        }
    }
}

/// The encrypt-and-permute baseline with `lambda` dummies.
#[derive(Debug, Clone, Copy)]
pub struct Slic {
    pub lambda: u64,
    pub cs: u64,
}

/// Logger state plus the slot layout, which the challenger tracks to score
/// modifications.
#[derive(Debug, Clone)]
pub struct SlicDevice {
    pub state: SlicState,
    /// slot → ordinal stored there
    pub layout: Vec<u64>,
}

impl Slic {
    fn push(device: &mut SlicDevice, message: &[u8]) {
        let pos = device.state.next_position() as usize;
        slic_log(&mut device.state, message);
        let g = device.state.count;
        device.layout.push(g);
        let last = device.layout.len() - 1;
        device.layout.swap(pos - 1, last);
    }
}

impl Scheme for Slic {
    type Device = SlicDevice;
    type Verifier = SlicInit;

    fn name(&self) -> &'static str {
        "slic"
    }

    fn cs(&self) -> u64 {
        self.cs
    }

    fn rate(&self) -> Option<u64> {
        None
    }

    fn setup(&self, seed: &[u8; 32]) -> (SlicDevice, SlicInit, Vec<Vec<u8>>) {
        let (state, init) = slic_gen(seed, self.lambda).expect("lambda checked by the game");
        let layout = replay_layout(&init, self.lambda);
        let prefix = (1..=self.lambda).map(SlicInit::dummy).collect();
        (SlicDevice { state, layout }, init, prefix)
    }

    fn log(&self, device: &mut SlicDevice, message: &[u8]) {
        Slic::push(device, message);
    }

    fn stored(&self, device: &SlicDevice) -> u64 {
        device.state.entries.len() as u64
    }

    fn lstore_prefix(&self, device: &SlicDevice, keep: u64) -> Vec<u8> {
        serialize_slic(&device.state.entries[..keep as usize])
    }

    fn kstore(&self, _device: &SlicDevice) -> Vec<u8> {
        Vec::new()
    }

    fn modify(&self, device: &SlicDevice, index: u64, rng: &mut ChaCha8Rng) -> Vec<u8> {
        let mut entries = device.state.entries.clone();
        if let Some(slot) = device.layout.iter().position(|g| *g == index) {
            let ct = &mut entries[slot].ciphertext;
            if !ct.is_empty() {
                let at = rng.random_range(0..ct.len());
                ct[at] ^= rng.random_range(1..=255u8);
            }
        }
        serialize_slic(&entries)
    }

    fn recover(&self, lstore: &[u8], _kstore: &[u8], verifier: &SlicInit) -> RecoverResult {
        slic_recover(lstore, verifier, self.cs)
    }

    fn theoretical(&self, strategy: &AttackStrategy, config: &GameConfig) -> Option<f64> {
        match (strategy, config.mode) {
            (AttackStrategy::RewindToQueried { .. }, AdversaryMode::Adaptive) => Some(1.0),
            _ => None,
        }
    }
}
