//! Throughput of the double-key logger against two references: the
//! permuting baseline and an unauthenticated plain writer.

use std::io::Write;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::crypto::CfParams;
use crate::log::format::lstore_header;
use crate::log::{gen_with_sink, serialize_kstore, InitMeta, InitialState, LogConfig, LogError, WriterSink};
use crate::recovery::recover;
use crate::slic::{serialize_slic, slic_gen, slic_log, slic_recover, SlicError};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BenchConfig {
    pub events: u64,
    pub cf: CfParams,
    pub cs: u64,
    pub lambda: u64,
    pub message_len: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BenchReport {
    pub events: u64,
    pub message_len: usize,
    pub ours_seconds: f64,
    pub ours_events_per_sec: f64,
    pub plain_seconds: f64,
    pub plain_events_per_sec: f64,
    pub slic_seconds: f64,
    pub slic_events_per_sec: f64,
    /// Slowdown of the double-key logger relative to the plain writer.
    pub ours_vs_plain: f64,
    /// Slowdown of the baseline relative to the double-key logger.
    pub slic_vs_ours: f64,
    pub ours_recover_seconds: f64,
    pub slic_recover_seconds: f64,
}

#[derive(Debug, thiserror::Error)]
pub enum BenchError {
    #[error(transparent)]
    Log(#[from] LogError),
    #[error(transparent)]
    Slic(#[from] SlicError),
}

/// `n` printable ASCII lines of `len` characters.
pub fn synthetic_messages(n: u64, len: usize, seed: u64) -> Vec<Vec<u8>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| (0..len).map(|_| rng.random_range(b'!'..=b'~')).collect()).collect()
}

/// A finished double-key log held in memory.
pub struct TimedLog {
    pub elapsed: Duration,
    pub lstore: Vec<u8>,
    pub kstore: Vec<u8>,
    pub init: InitialState,
}

/// Log `messages` through the double-key logger into an in-memory store.
pub fn time_ours(messages: &[Vec<u8>], cf: CfParams, cs: u64, seed: u64) -> Result<TimedLog, LogError> {
    let mut key = [0u8; 32];
    key[..8].copy_from_slice(&seed.to_be_bytes());
    let capacity = messages.iter().map(|m| m.len() + 36).sum::<usize>() + 1024;
    let mut buf = Vec::with_capacity(capacity);
    buf.extend_from_slice(&lstore_header());
    let start = Instant::now();
    let config = LogConfig { cf, cs: cs as usize };
    let (mut device, init) = gen_with_sink(&key, config, &InitMeta::default(), WriterSink::new(buf, 0))?;
    for m in messages {
        device.log_event(m)?;
    }
    device.flush()?;
    let elapsed = start.elapsed();
    let kstore = serialize_kstore(&device.kstore);
    Ok(TimedLog { elapsed, lstore: device.lstore.into_inner(), kstore, init })
}

/// Newline-terminated messages into a buffer, no authentication.
pub fn time_plain(messages: &[Vec<u8>]) -> Duration {
    let mut out = Vec::with_capacity(messages.iter().map(|m| m.len() + 1).sum());
    let start = Instant::now();
    for m in messages {
        out.write_all(m).expect("vec write");
        out.push(b'\n');
    }
    let elapsed = start.elapsed();
    std::hint::black_box(&out);
    elapsed
}

pub fn run_bench(config: &BenchConfig) -> Result<BenchReport, BenchError> {
    let messages = synthetic_messages(config.events, config.message_len, config.seed);

    let plain = time_plain(&messages);
    let ours = time_ours(&messages, config.cf, config.cs, config.seed)?;
    let start = Instant::now();
    let verdict = recover(&ours.lstore, &ours.kstore, &ours.init, config.cf, config.cs);
    let ours_recover = start.elapsed();
    debug_assert!(verdict.is_trusted());

    let mut key = [0u8; 32];
    key[..8].copy_from_slice(&config.seed.to_be_bytes());
    let (mut slic, slic_init) = slic_gen(&key, config.lambda)?;
    let start = Instant::now();
    for m in &messages {
        slic_log(&mut slic, m);
    }
    let slic_elapsed = start.elapsed();
    let bytes = serialize_slic(&slic.entries);
    let start = Instant::now();
    std::hint::black_box(slic_recover(&bytes, &slic_init, config.cs));
    let slic_recover_elapsed = start.elapsed();

    let secs = |d: Duration| d.as_secs_f64().max(1e-9);
    let rate = |d: Duration| config.events as f64 / secs(d);
    Ok(BenchReport {
        events: config.events,
        message_len: config.message_len,
        ours_seconds: secs(ours.elapsed),
        ours_events_per_sec: rate(ours.elapsed),
        plain_seconds: secs(plain),
        plain_events_per_sec: rate(plain),
        slic_seconds: secs(slic_elapsed),
        slic_events_per_sec: rate(slic_elapsed),
        ours_vs_plain: secs(ours.elapsed) / secs(plain),
        slic_vs_ours: secs(slic_elapsed) / secs(ours.elapsed),
        ours_recover_seconds: secs(ours_recover),
        slic_recover_seconds: secs(slic_recover_elapsed),
    })
}
