//! Subcommand bodies. Each prints JSON lines on stdout.

use std::fs::{self, File, OpenOptions};
use std::io::{self, BufRead, BufReader, Read};
use std::net::{SocketAddr, UdpSocket};
use std::path::Path;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::time::{Duration, Instant, SystemTime, UNIX_EPOCH};

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

use adcl_core::harness::{check_game, DoubleKey, Scheme, Slic};
use adcl_core::log::format::{lstore_records, parse_initial, parse_kstore, serialize_initial, KStoreSnapshot};
use adcl_core::log::{DeviceConfig, RecordSink};
use adcl_core::perf::{run_bench, BenchConfig, BenchReport};
use adcl_core::recovery::RejectReason;
use adcl_core::{
    gen, normal_crash, recover, run_game, AdversaryMode, AttackStrategy, CfVariant, CrashParams, DeviceState,
    GameConfig, InitMeta, InitialState, KStoreAction, LogConfig, LogError, RecoverResult,
};

use crate::store::{lock_exclusive, write_atomic, FileSink};
use crate::{Common, Failure, SchemeArg, StrategyArg};

/// Largest UDP payload.
const DATAGRAM_MAX: usize = 65_536;
/// How often the UDP loop checks for SIGINT.
const POLL_INTERVAL: Duration = Duration::from_millis(100);

fn emit<T: Serialize>(value: &T) {
    println!("{}", serde_json::to_string(value).expect("reports serialize"));
}

fn log_failure(e: LogError) -> Failure {
    match e {
        LogError::Io(e) => Failure::io("writing log", e),
        other => Failure::Usage(other.to_string()),
    }
}

fn read_initial(c: &Common) -> Result<InitialState, Failure> {
    let what = || format!("initial state {}", c.init_state.display());
    let bytes = fs::read(&c.init_state).map_err(|e| Failure::io(what(), e))?;
    parse_initial(&bytes).map_err(|e| Failure::Io(format!("{}: {e}", what())))
}

fn fresh_seed(seed: Option<u64>) -> ([u8; 32], InitMeta) {
    let mut key = [0u8; 32];
    let mut meta = InitMeta::default();
    match seed {
        Some(s) => {
            let mut rng = ChaCha8Rng::seed_from_u64(s);
            rng.fill(&mut key);
            rng.fill(&mut meta.device_id);
        }
        None => {
            let mut rng = rand::rng();
            rng.fill(&mut key);
            rng.fill(&mut meta.device_id);
            meta.created_unix = SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs());
        }
    }
    (key, meta)
}

#[derive(Serialize)]
struct InitReport<'a> {
    lstore: &'a Path,
    kstore: &'a Path,
    init_state: &'a Path,
    records: u64,
    m: u64,
    cs: u64,
    cf: CfVariant,
}

pub fn init(c: &Common) -> Result<(), Failure> {
    for p in [&c.lstore, &c.kstore, &c.init_state] {
        if p.exists() && !c.force {
            return Err(Failure::Usage(format!("{} exists; pass --force to overwrite", p.display())));
        }
    }
    // Refuse to clobber a log another process is appending to.
    let _guard = match File::open(&c.lstore) {
        Ok(f) => {
            lock_exclusive(&f, &c.lstore).map_err(|e| Failure::io("locking log store", e))?;
            Some(f)
        }
        Err(_) => None,
    };

    let (seed, meta) = fresh_seed(c.seed);
    let config = LogConfig { cf: c.cf_params(), cs: c.cs as usize };
    let (mut device, init) = gen(&seed, config, &meta).map_err(log_failure)?;
    device.flush().map_err(log_failure)?;

    let write = |path: &Path, bytes: &[u8], private: bool| {
        write_atomic(path, bytes, private).map_err(|e| Failure::io(format!("writing {}", path.display()), e))
    };
    write(&c.init_state, &serialize_initial(&init), true)?;
    write(&c.kstore, &device.serialize_kstore(), true)?;
    write(&c.lstore, &device.serialize_lstore(), false)?;

    emit(&InitReport {
        lstore: &c.lstore,
        kstore: &c.kstore,
        init_state: &c.init_state,
        records: device.last_index(),
        m: c.m,
        cs: c.cs,
        cf: c.cf.into(),
    });
    Ok(())
}

fn under_limit(count: u64, max: Option<u64>) -> bool {
    max.is_none_or(|m| count < m)
}

fn ingest_lines<S: RecordSink>(
    device: &mut DeviceState<S>,
    input: Option<&Path>,
    max: Option<u64>,
) -> Result<u64, Failure> {
    let mut reader: Box<dyn BufRead> = match input {
        None => Box::new(io::stdin().lock()),
        Some(p) if p.as_os_str() == "-" => Box::new(io::stdin().lock()),
        Some(p) => Box::new(BufReader::new(File::open(p).map_err(|e| Failure::io(p.display(), e))?)),
    };
    let mut line = Vec::new();
    let mut count = 0;
    while under_limit(count, max) {
        line.clear();
        if reader.read_until(b'\n', &mut line).map_err(|e| Failure::io("reading input", e))? == 0 {
            break;
        }
        if line.last() == Some(&b'\n') {
            line.pop();
            if line.last() == Some(&b'\r') {
                line.pop();
            }
        }
        device.log_event(&line).map_err(log_failure)?;
        count += 1;
    }
    Ok(count)
}

fn ingest_udp<S: RecordSink>(device: &mut DeviceState<S>, addr: SocketAddr, max: Option<u64>) -> Result<u64, Failure> {
    let socket = UdpSocket::bind(addr).map_err(|e| Failure::io(format!("binding {addr}"), e))?;
    socket.set_read_timeout(Some(POLL_INTERVAL)).map_err(|e| Failure::io("configuring socket", e))?;
    let local = socket.local_addr().map_err(|e| Failure::io("configuring socket", e))?;
    eprintln!("listening on {local}");

    let stop = Arc::new(AtomicBool::new(false));
    let flag = Arc::clone(&stop);
    ctrlc::set_handler(move || flag.store(true, Ordering::SeqCst))
        .map_err(|e| Failure::Io(format!("installing SIGINT handler: {e}")))?;

    let mut buf = vec![0u8; DATAGRAM_MAX];
    let mut count = 0;
    while !stop.load(Ordering::SeqCst) && under_limit(count, max) {
        match socket.recv_from(&mut buf) {
            Ok((len, _)) => {
                device.log_event(&buf[..len]).map_err(log_failure)?;
                count += 1;
            }
            Err(e)
                if matches!(
                    e.kind(),
                    io::ErrorKind::WouldBlock | io::ErrorKind::TimedOut | io::ErrorKind::Interrupted
                ) => {}
            Err(e) => return Err(Failure::io("receiving datagram", e)),
        }
    }
    Ok(count)
}

#[derive(Serialize)]
struct AppendReport {
    appended: u64,
    last_index: u64,
    seconds: f64,
    events_per_sec: f64,
}

pub fn append(c: &Common, input: Option<&Path>, max: Option<u64>) -> Result<(), Failure> {
    let init = read_initial(c)?;
    let kbytes = fs::read(&c.kstore)
        .map_err(|e| Failure::io(format!("key store {} (cannot evolve keys)", c.kstore.display()), e))?;
    let kstore = match parse_kstore(&kbytes) {
        Ok(KStoreSnapshot::Present(k)) => k,
        Ok(KStoreSnapshot::Empty) => return Err(Failure::Untrusted("key store holds no keys; cannot evolve".into())),
        Err(e) => return Err(Failure::Untrusted(format!("key store unreadable: {e}"))),
    };

    let mut file =
        OpenOptions::new().read(true).append(true).open(&c.lstore).map_err(|e| Failure::io(c.lstore.display(), e))?;
    lock_exclusive(&file, &c.lstore).map_err(|e| Failure::io("locking log store", e))?;
    let mut bytes = Vec::new();
    file.read_to_end(&mut bytes).map_err(|e| Failure::io(c.lstore.display(), e))?;
    let (records, torn) =
        lstore_records(&bytes).map_err(|e| Failure::Untrusted(format!("log store unreadable: {e}")))?;
    let stored = records.len() as u64;
    if torn {
        return Err(Failure::Untrusted("log store ends in a partial record; run verify".into()));
    }
    if stored != kstore.seq_index {
        return Err(Failure::Untrusted(format!(
            "log store holds {stored} records but the key store is at event {}; run verify",
            kstore.seq_index
        )));
    }

    let config = DeviceConfig { cf: c.cf_params(), cs: c.cs as usize, chi: init.chi, chi_prime: init.chi_prime };
    let mut device = DeviceState::resume(kstore, config, FileSink::new(file, c.kstore.clone(), stored));
    let start = Instant::now();
    let ingested = match c.udp {
        Some(addr) => ingest_udp(&mut device, addr, max),
        None => ingest_lines(&mut device, input, max),
    };
    // Whatever was accepted before a failure still reaches disk.
    let flushed = device.flush().map_err(log_failure);
    let appended = ingested?;
    flushed?;
    let seconds = start.elapsed().as_secs_f64();

    emit(&AppendReport {
        appended,
        last_index: device.last_index(),
        seconds,
        events_per_sec: appended as f64 / seconds.max(1e-9),
    });
    Ok(())
}

#[derive(Serialize)]
struct VerifyReport {
    verdict: &'static str,
    n_prime: u64,
    recovered: u64,
    expendable_lo: u64,
    expendable_hi: u64,
    #[serde(skip_serializing_if = "Option::is_none")]
    reason: Option<&'static str>,
    #[serde(skip_serializing_if = "Option::is_none")]
    failed_index: Option<u64>,
}

fn reason_label(r: RejectReason) -> (&'static str, Option<u64>) {
    match r {
        RejectReason::MalformedLStore => ("malformed_lstore", None),
        RejectReason::MalformedKStore => ("malformed_kstore", None),
        RejectReason::KeyNotCandidate => ("key_not_candidate", None),
        RejectReason::NothingVerified => ("nothing_verified", None),
        RejectReason::NonExpendableGap(i) => ("non_expendable_gap", Some(i)),
    }
}

pub fn verify(c: &Common) -> Result<(), Failure> {
    let init = read_initial(c)?;
    let mut file = File::open(&c.lstore).map_err(|e| Failure::io(c.lstore.display(), e))?;
    file.lock_shared().map_err(|e| Failure::io("locking log store", e))?;
    let mut lbytes = Vec::new();
    file.read_to_end(&mut lbytes).map_err(|e| Failure::io(c.lstore.display(), e))?;
    let kbytes = fs::read(&c.kstore).map_err(|e| Failure::io(c.kstore.display(), e))?;

    let result = recover(&lbytes, &kbytes, &init, c.cf_params(), c.cs);
    let exp = result.expendable();
    let mut report = VerifyReport {
        verdict: "trusted",
        n_prime: result.n_prime(),
        recovered: 0,
        expendable_lo: exp.lo,
        expendable_hi: exp.hi,
        reason: None,
        failed_index: None,
    };
    match result {
        RecoverResult::Trusted(log) => {
            report.recovered = log.pairs.len() as u64;
            emit(&report);
            Ok(())
        }
        RecoverResult::Untrusted(rej) => {
            let (label, index) = reason_label(rej.reason);
            report.verdict = "untrusted";
            report.recovered = rej.verified;
            report.reason = Some(label);
            report.failed_index = index;
            emit(&report);
            Err(Failure::Untrusted(format!("log is untrusted ({label})")))
        }
    }
}

#[derive(Debug, Default, Serialize)]
struct CrashTally {
    trusted: u64,
    untrusted: u64,
    /// Trusted verdicts that recovered fewer than `n' − cs` events.
    floor_violations: u64,
    torn: u64,
    sc_key_lost: u64,
    seq_key_lost: u64,
    both_keys_lost: u64,
    dropped: u64,
}

impl CrashTally {
    fn merge(mut self, o: CrashTally) -> CrashTally {
        self.trusted += o.trusted;
        self.untrusted += o.untrusted;
        self.floor_violations += o.floor_violations;
        self.torn += o.torn;
        self.sc_key_lost += o.sc_key_lost;
        self.seq_key_lost += o.seq_key_lost;
        self.both_keys_lost += o.both_keys_lost;
        self.dropped += o.dropped;
        self
    }
}

#[derive(Serialize)]
struct CrashSimReport {
    trials: u64,
    max_events: u64,
    m: u64,
    cs: u64,
    cf: CfVariant,
    alpha: f64,
    #[serde(flatten)]
    tally: CrashTally,
    mean_dropped: f64,
}

fn crash_trial(c: &Common, max_events: u64, seed: u64, t: u64) -> Result<CrashTally, Failure> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(t);
    let mut key = [0u8; 32];
    rng.fill(&mut key);
    let events = rng.random_range(1..=max_events);
    let cf = c.cf_params();
    let (mut device, init) =
        gen(&key, LogConfig { cf, cs: c.cs as usize }, &InitMeta::default()).map_err(log_failure)?;
    for i in 0..events {
        device.log_event(format!("event {i}").as_bytes()).map_err(log_failure)?;
    }
    let params = CrashParams::new(c.alpha, c.cs, rng.next_u64()).map_err(|e| Failure::Usage(e.to_string()))?;
    let crashed = normal_crash(&device, &params);
    let result = recover(&crashed.lstore_bytes, &crashed.kstore_bytes, &init, cf, c.cs);

    let mut tally = CrashTally {
        torn: crashed.torn.into(),
        sc_key_lost: crashed.sc_key_lost.into(),
        seq_key_lost: crashed.seq_key_lost.into(),
        both_keys_lost: (crashed.sc_key_lost && crashed.seq_key_lost).into(),
        dropped: crashed.dropped,
        ..CrashTally::default()
    };
    match &result {
        RecoverResult::Trusted(log) => {
            tally.trusted = 1;
            let floor = log.n_prime.saturating_sub(c.cs);
            tally.floor_violations = u64::from((log.pairs.len() as u64) < floor);
        }
        RecoverResult::Untrusted(_) => tally.untrusted = 1,
    }
    Ok(tally)
}

pub fn crash_sim(c: &Common, max_events: u64) -> Result<(), Failure> {
    CrashParams::new(c.alpha, c.cs, 0).map_err(|e| Failure::Usage(e.to_string()))?;
    let seed = c.seed.unwrap_or(0);
    let tally = (0..c.trials)
        .into_par_iter()
        .map(|t| crash_trial(c, max_events, seed, t))
        .try_reduce(CrashTally::default, |a, b| Ok(a.merge(b)))?;
    emit(&CrashSimReport {
        trials: c.trials,
        max_events,
        m: c.m,
        cs: c.cs,
        cf: c.cf.into(),
        alpha: c.alpha,
        mean_dropped: tally.dropped as f64 / c.trials as f64,
        tally,
    });
    Ok(())
}

/// The attack-bench grid: one game per truncation depth.
pub struct Grid {
    pub ell: Vec<u64>,
    pub strategy: StrategyArg,
    pub scheme: SchemeArg,
    pub events: Option<u64>,
    pub lambda: u64,
    pub non_adaptive: bool,
}

fn strategy_for(grid: &Grid, ell: u64, prefix: u64, events: u64, cs: u64) -> Result<AttackStrategy, Failure> {
    let rewind = |kstore| {
        (prefix + events)
            .checked_sub(cs + 1 + ell)
            .map(|target| AttackStrategy::RewindToQueried { target, kstore })
            .ok_or_else(|| Failure::Usage(format!("{events} events is too few to rewind by cs+{ell}")))
    };
    match grid.strategy {
        StrategyArg::Truncate => Ok(AttackStrategy::TruncateKeepKey { ell }),
        StrategyArg::RewindKeep => rewind(KStoreAction::Keep),
        StrategyArg::RewindErase => rewind(KStoreAction::Erase),
        StrategyArg::Modify => Ok(AttackStrategy::ModifyRecord { index: ell + 1 }),
        StrategyArg::TotalDeletion => Ok(AttackStrategy::TotalDeletion),
    }
}

fn play_grid<S: Scheme>(scheme: &S, c: &Common, grid: &Grid, prefix: u64) -> Result<(), Failure> {
    let mode = if grid.non_adaptive { AdversaryMode::NonAdaptive } else { AdversaryMode::Adaptive };
    let mut plan = Vec::with_capacity(grid.ell.len());
    for &ell in &grid.ell {
        let events = grid.events.unwrap_or(2 * c.cs + ell + c.m);
        let strategy = strategy_for(grid, ell, prefix, events, c.cs)?;
        let config = GameConfig { events, mode };
        check_game(scheme, &strategy, &config)
            .map_err(|e| Failure::Usage(format!("invalid grid point ell={ell}: {e}")))?;
        plan.push((strategy, config));
    }
    let seed = c.seed.unwrap_or(0);
    for (k, (strategy, config)) in plan.into_iter().enumerate() {
        let report = run_game(scheme, strategy, config, c.trials, seed.wrapping_add(k as u64))
            .map_err(|e| Failure::Usage(e.to_string()))?;
        emit(&report);
    }
    Ok(())
}

pub fn attack_bench(c: &Common, grid: &Grid) -> Result<(), Failure> {
    match grid.scheme {
        SchemeArg::Ours => play_grid(&DoubleKey::new(c.cf_params(), c.cs), c, grid, 1),
        SchemeArg::Slic => play_grid(&Slic { lambda: grid.lambda, cs: c.cs }, c, grid, grid.lambda),
    }
}

#[derive(Serialize)]
struct BenchOutput {
    m: u64,
    cs: u64,
    cf: CfVariant,
    lambda: u64,
    #[serde(flatten)]
    report: BenchReport,
}

pub fn bench(c: &Common, events: u64, message_len: usize, lambda: u64) -> Result<(), Failure> {
    let config = BenchConfig { events, cf: c.cf_params(), cs: c.cs, lambda, message_len, seed: c.seed.unwrap_or(0) };
    let report = run_bench(&config).map_err(|e| Failure::Usage(e.to_string()))?;
    emit(&BenchOutput { m: c.m, cs: c.cs, cf: c.cf.into(), lambda, report });
    Ok(())
}
