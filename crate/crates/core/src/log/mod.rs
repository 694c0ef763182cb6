//! The logging device. Two key chains feed a write-behind cache.
//!
//! Every event evolves the sequential key. When the choice function fires the
//! state-controlled key evolves too, and the record is tagged with the new
//! state-controlled key over `message ∥ previous state-controlled key`.
//! Otherwise the fresh sequential key tags the message alone.

pub mod format;

use std::io::{self, Write};

use thiserror::Error;

use crate::crypto::{compute_tag, evolve_key, prf, CfParams, Key256, Tag256, Tweak, KEY_LEN};

pub use format::{
    parse_initial, parse_kstore, parse_lstore, serialize_initial, serialize_kstore, serialize_lstore, FormatError,
    KStoreSnapshot, ParsedLStore,
};

/// Upper bound on a single message.
pub const MAX_MESSAGE_LEN: usize = 1 << 20;

/// Prefix of the record logged by [`gen`].
pub const INIT_TAG: &[u8; 9] = b"ADCL-INIT";

#[derive(Debug, Error)]
pub enum LogError {
    #[error("message of {0} bytes exceeds the {MAX_MESSAGE_LEN}-byte limit")]
    MessageTooLong(usize),
    #[error("cache size must be at least 1")]
    ZeroCache,
    #[error("writing log store: {0}")]
    Io(#[from] io::Error),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LogRecord {
    pub message: Vec<u8>,
    pub tag: Tag256,
}

/// The protected key store: current sequential and state-controlled keys.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct KStoreState {
    /// Key of event `seq_index`, already consumed.
    pub seq_key: Key256,
    /// Current state-controlled key.
    pub sc_key: Key256,
    pub seq_index: u64,
    /// Number of state-controlled evolutions so far.
    pub sc_epoch: u64,
}

/// Keys used for one event.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct KeyStep {
    pub index: u64,
    pub key: Key256,
    /// Previous state-controlled key; present iff the choice function fired.
    pub randomizer: Option<Key256>,
}

impl KeyStep {
    pub fn fired(&self) -> bool {
        self.randomizer.is_some()
    }
}

impl KStoreState {
    pub fn genesis(k0: Key256, k0_prime: Key256) -> Self {
        KStoreState { seq_key: k0, sc_key: k0_prime, seq_index: 0, sc_epoch: 0 }
    }

    /// Move both chains forward by one event. The verifier replays exactly
    /// this step to rebuild the key schedule.
    pub fn advance(&mut self, cf: &CfParams, chi: &Tweak, chi_prime: &Tweak) -> KeyStep {
        let index = self.seq_index + 1;
        self.seq_key = evolve_key(&self.seq_key, chi);
        self.seq_index = index;
        if cf.fires(&self.sc_key, index, self.sc_epoch) {
            let next = evolve_key(&self.sc_key, chi_prime);
            let previous = std::mem::replace(&mut self.sc_key, next);
            self.sc_epoch += 1;
            KeyStep { index, key: self.sc_key.clone(), randomizer: Some(previous) }
        } else {
            KeyStep { index, key: self.seq_key.clone(), randomizer: None }
        }
    }
}

/// Volatile cache between the logger and the disk.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct CacheState {
    /// Records not yet flushed to the log store, with their ordinals.
    pub pending: Vec<(u64, LogRecord)>,
    /// `(old, new)` state-controlled keys while an evolution is being
    /// committed. Cleared when the next event starts.
    pub key_update_in_flight: Option<(Key256, Key256)>,
}

/// Parameters fixed for the lifetime of a log.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LogConfig {
    pub cf: CfParams,
    /// Cache capacity in records.
    pub cs: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DeviceConfig {
    pub cf: CfParams,
    pub cs: usize,
    pub chi: Tweak,
    pub chi_prime: Tweak,
}

/// Verifier-side secret produced by [`gen`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct InitialState {
    pub k0: Key256,
    pub k0_prime: Key256,
    pub chi: Tweak,
    pub chi_prime: Tweak,
    pub init_message: Vec<u8>,
}

/// Contents of the initialization record.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct InitMeta {
    pub created_unix: u64,
    pub device_id: [u8; 16],
}

impl InitMeta {
    /// `"ADCL-INIT" ∥ BE64(created) ∥ device_id`
    pub fn to_message(&self) -> Vec<u8> {
        let mut m = Vec::with_capacity(INIT_TAG.len() + 8 + 16);
        m.extend_from_slice(INIT_TAG);
        m.extend_from_slice(&self.created_unix.to_be_bytes());
        m.extend_from_slice(&self.device_id);
        m
    }
}

/// Where flushed records go.
pub trait RecordSink {
    /// Persist a batch of records. `kstore` is the key state after the batch's
    /// last event, for sinks that also persist keys.
    fn persist(&mut self, kstore: &KStoreState, records: Vec<(u64, LogRecord)>) -> io::Result<()>;

    /// Number of records persisted so far.
    fn persisted(&self) -> u64;
}

impl RecordSink for Vec<LogRecord> {
    fn persist(&mut self, _kstore: &KStoreState, records: Vec<(u64, LogRecord)>) -> io::Result<()> {
        self.extend(records.into_iter().map(|(_, r)| r));
        Ok(())
    }

    fn persisted(&self) -> u64 {
        self.len() as u64
    }
}

/// Streams records in LStore framing into any writer. The caller writes the
/// header when starting a fresh file.
#[derive(Debug)]
pub struct WriterSink<W> {
    writer: W,
    count: u64,
    buf: Vec<u8>,
}

impl<W: Write> WriterSink<W> {
    pub fn new(writer: W, already_persisted: u64) -> Self {
        WriterSink { writer, count: already_persisted, buf: Vec::new() }
    }

    pub fn get_ref(&self) -> &W {
        &self.writer
    }

    pub fn into_inner(self) -> W {
        self.writer
    }
}

impl<W: Write> RecordSink for WriterSink<W> {
    fn persist(&mut self, _kstore: &KStoreState, records: Vec<(u64, LogRecord)>) -> io::Result<()> {
        self.buf.clear();
        for (_, r) in &records {
            format::encode_record(&mut self.buf, r);
        }
        self.writer.write_all(&self.buf)?;
        self.count += records.len() as u64;
        Ok(())
    }

    fn persisted(&self) -> u64 {
        self.count
    }
}

/// `Σ = [KStore, LStore, Cache]` plus the log's fixed parameters.
#[derive(Debug, Clone)]
pub struct DeviceState<S = Vec<LogRecord>> {
    pub kstore: KStoreState,
    pub lstore: S,
    pub cache: CacheState,
    pub config: DeviceConfig,
}

fn derive(seed: &[u8; KEY_LEN], label: &[u8]) -> [u8; KEY_LEN] {
    prf(seed, &[b"adcl/gen/", label])
}

/// Expand 32 bytes of entropy into the initial keys and tweaks.
pub fn derive_initial(seed: &[u8; KEY_LEN], meta: &InitMeta) -> InitialState {
    InitialState {
        k0: Key256(derive(seed, b"k0")),
        k0_prime: Key256(derive(seed, b"k0-prime")),
        chi: Tweak(derive(seed, b"chi")),
        chi_prime: Tweak(derive(seed, b"chi-prime")),
        init_message: meta.to_message(),
    }
}

/// Set up a fresh log and record the initialization message as event 1.
pub fn gen(seed: &[u8; KEY_LEN], config: LogConfig, meta: &InitMeta) -> Result<(DeviceState, InitialState), LogError> {
    gen_with_sink(seed, config, meta, Vec::new())
}

pub fn gen_with_sink<S: RecordSink>(
    seed: &[u8; KEY_LEN],
    config: LogConfig,
    meta: &InitMeta,
    sink: S,
) -> Result<(DeviceState<S>, InitialState), LogError> {
    if config.cs == 0 {
        return Err(LogError::ZeroCache);
    }
    let init = derive_initial(seed, meta);
    let device_config = DeviceConfig { cf: config.cf, cs: config.cs, chi: init.chi, chi_prime: init.chi_prime };
    let mut device =
        DeviceState::resume(KStoreState::genesis(init.k0.clone(), init.k0_prime.clone()), device_config, sink);
    device.log_event(&init.init_message)?;
    Ok((device, init))
}

impl<S: RecordSink> DeviceState<S> {
    /// Continue a log from a persisted key store; the cache starts empty.
    pub fn resume(kstore: KStoreState, config: DeviceConfig, lstore: S) -> Self {
        DeviceState { kstore, lstore, cache: CacheState::default(), config }
    }

    /// Ordinal of the most recent event.
    pub fn last_index(&self) -> u64 {
        self.kstore.seq_index
    }

    /// Append one event and return its ordinal. Oversized messages are
    /// rejected before any state changes.
    pub fn log_event(&mut self, message: &[u8]) -> Result<u64, LogError> {
        if message.len() > MAX_MESSAGE_LEN {
            return Err(LogError::MessageTooLong(message.len()));
        }
        // The previous event's update is committed by now.
        self.cache.key_update_in_flight = None;

        let cfg = &self.config;
        let step = self.kstore.advance(&cfg.cf, &cfg.chi, &cfg.chi_prime);
        let tag = compute_tag(&step.key, message, step.randomizer.as_ref());
        if let Some(old) = step.randomizer {
            self.cache.key_update_in_flight = Some((old, step.key));
        }
        self.cache.pending.push((step.index, LogRecord { message: message.to_vec(), tag }));
        if self.cache.pending.len() >= self.config.cs {
            self.flush()?;
        }
        Ok(step.index)
    }

    /// Write every pending record through to the sink.
    pub fn flush(&mut self) -> Result<(), LogError> {
        if self.cache.pending.is_empty() {
            return Ok(());
        }
        let batch = std::mem::take(&mut self.cache.pending);
        self.lstore.persist(&self.kstore, batch)?;
        Ok(())
    }
}

impl DeviceState {
    /// The on-disk LStore; pending cache entries are not included.
    pub fn serialize_lstore(&self) -> Vec<u8> {
        serialize_lstore(&self.lstore)
    }

    pub fn serialize_kstore(&self) -> Vec<u8> {
        serialize_kstore(&self.kstore)
    }

    /// Every record in ordinal order, as if the cache were flushed.
    pub fn all_records(&self) -> impl Iterator<Item = &LogRecord> {
        self.lstore.iter().chain(self.cache.pending.iter().map(|(_, r)| r))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::crypto::verify_tag;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn config(m: u64, cs: usize) -> LogConfig {
        LogConfig { cf: CfParams::hash_threshold(m).unwrap(), cs }
    }

    #[test]
    fn gen_is_deterministic() {
        let meta = InitMeta { created_unix: 1_700_000_000, device_id: [9; 16] };
        let (a, ia) = gen(&[5; 32], config(16, 4), &meta).unwrap();
        let (b, ib) = gen(&[5; 32], config(16, 4), &meta).unwrap();
        assert_eq!(ia, ib);
        assert_eq!(a.kstore, b.kstore);
        assert_eq!(a.all_records().collect::<Vec<_>>(), b.all_records().collect::<Vec<_>>());
        assert_eq!(a.last_index(), 1);
        assert_eq!(a.all_records().count(), 1);
        assert_eq!(serialize_kstore(&a.kstore), serialize_kstore(&b.kstore));
    }

    #[test]
    fn gen_leaves_cache_empty_after_flush() {
        let (mut d, init) = gen(&[1; 32], config(16, 4), &InitMeta::default()).unwrap();
        d.flush().unwrap();
        assert!(d.cache.pending.is_empty());
        assert_eq!(d.lstore.len(), 1);
        assert_eq!(d.lstore[0].message, init.init_message);
        assert_eq!(&init.init_message[..9], b"ADCL-INIT");
        assert_eq!(init.init_message.len(), 33);
    }

    #[test]
    fn distinct_seeds_distinct_keys() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut seen = std::collections::HashSet::new();
        for _ in 0..1000 {
            let init = derive_initial(&rng.random(), &InitMeta::default());
            assert!(seen.insert(init.k0.0));
        }
    }

    #[test]
    fn zero_cache_rejected() {
        assert!(matches!(gen(&[0; 32], config(4, 0), &InitMeta::default()), Err(LogError::ZeroCache)));
    }

    #[test]
    fn oversized_message_leaves_state_unchanged() {
        let (mut d, _) = gen(&[2; 32], config(4, 8), &InitMeta::default()).unwrap();
        let before = (d.kstore.clone(), d.cache.clone(), d.lstore.clone());
        let err = d.log_event(&vec![0u8; MAX_MESSAGE_LEN + 1]).unwrap_err();
        assert!(matches!(err, LogError::MessageTooLong(_)));
        assert_eq!((d.kstore.clone(), d.cache.clone(), d.lstore.clone()), before);
        d.log_event(&vec![0u8; MAX_MESSAGE_LEN]).unwrap();
    }

    #[test]
    fn cache_flushes_at_capacity() {
        let (mut d, _) = gen(&[3; 32], config(4, 5), &InitMeta::default()).unwrap();
        for i in 2..=12u64 {
            d.log_event(b"x").unwrap();
            assert!(d.cache.pending.len() < 5);
            assert_eq!(d.lstore.len() as u64 + d.cache.pending.len() as u64, i);
        }
        assert_eq!(d.lstore.len(), 10);
    }

    #[test]
    fn unit_rate_tags_every_record_with_state_controlled_chain() {
        let (mut d, init) = gen(&[4; 32], config(1, 3), &InitMeta::default()).unwrap();
        for i in 0..20u32 {
            d.log_event(&i.to_be_bytes()).unwrap();
        }
        d.flush().unwrap();
        let mut seq = init.k0.clone();
        let mut sc = init.k0_prime.clone();
        for r in &d.lstore {
            seq = evolve_key(&seq, &init.chi);
            let next = evolve_key(&sc, &init.chi_prime);
            assert!(verify_tag(&next, &r.message, Some(&sc), &r.tag));
            assert!(!verify_tag(&seq, &r.message, None, &r.tag));
            sc = next;
        }
        assert_eq!(d.kstore.sc_epoch, 21);
    }

    #[test]
    fn state_controlled_rate_over_many_events() {
        let m = 64u64;
        let n = 1u64 << 16;
        let (mut d, _) = gen(&[6; 32], config(m, 256), &InitMeta::default()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for _ in 1..n {
            let msg: [u8; 20] = rng.random();
            d.log_event(&msg).unwrap();
        }
        let p = 1.0 / m as f64;
        let mean = n as f64 * p;
        let sigma = (n as f64 * p * (1.0 - p)).sqrt();
        let got = d.kstore.sc_epoch as f64;
        assert!((got - mean).abs() <= 3.0 * sigma, "{got} vs {mean} ± {sigma}");
    }

    #[test]
    fn only_one_old_state_controlled_key_is_reachable() {
        let (mut d, init) = gen(&[7; 32], config(2, 4), &InitMeta::default()).unwrap();
        let mut sc_history = vec![init.k0_prime.clone()];
        let mut seq_history = vec![init.k0.clone()];
        for i in 0..200u32 {
            let before_sc = d.kstore.sc_key.clone();
            d.log_event(&i.to_le_bytes()).unwrap();
            if d.kstore.sc_key != before_sc {
                sc_history.push(d.kstore.sc_key.clone());
            }
            // Keys of earlier events must be gone from the device.
            for old in &seq_history {
                assert_ne!(&d.kstore.seq_key, old);
            }
            seq_history.push(d.kstore.seq_key.clone());
            let mut held = vec![&d.kstore.sc_key];
            if let Some((old, new)) = &d.cache.key_update_in_flight {
                held.push(old);
                held.push(new);
            }
            let current = sc_history.last().unwrap();
            let reachable = sc_history.iter().filter(|k| *k != current && held.contains(k)).count();
            assert!(reachable <= 1);
        }
    }

    #[test]
    fn writer_sink_matches_in_memory_store() {
        let cfg = config(8, 16);
        let (mut mem, _) = gen(&[8; 32], cfg, &InitMeta::default()).unwrap();
        let (mut streamed, _) =
            gen_with_sink(&[8; 32], cfg, &InitMeta::default(), WriterSink::new(format::lstore_header().to_vec(), 0))
                .unwrap();
        for i in 0..100u32 {
            mem.log_event(&i.to_be_bytes()).unwrap();
            streamed.log_event(&i.to_be_bytes()).unwrap();
        }
        mem.flush().unwrap();
        streamed.flush().unwrap();
        assert_eq!(streamed.lstore.persisted(), 101);
        assert_eq!(streamed.lstore.get_ref(), &mem.serialize_lstore());
    }
}
