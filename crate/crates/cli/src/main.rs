//! `adcl`: the operator's front end for double evolving key logs.

mod commands;
mod store;

use std::net::SocketAddr;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use thiserror::Error;

use adcl_core::{CfParams, CfVariant};

/// Failure classes. The numeric codes are a stable contract.
#[derive(Debug, Error)]
pub enum Failure {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Untrusted(String),
    #[error("{0}")]
    Io(String),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Usage(_) => 2,
            Failure::Untrusted(_) => 3,
            Failure::Io(_) => 4,
        }
    }

    pub fn io(what: impl std::fmt::Display, e: std::io::Error) -> Self {
        Failure::Io(format!("{what}: {e}"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum CfArg {
    Hash,
    Uniform,
}

impl From<CfArg> for CfVariant {
    fn from(c: CfArg) -> Self {
        match c {
            CfArg::Hash => CfVariant::HashThreshold,
            CfArg::Uniform => CfVariant::Uniform,
        }
    }
}

fn positive(s: &str) -> Result<u64, String> {
    match s.parse::<u64>() {
        Ok(0) => Err("must be at least 1".into()),
        Ok(v) => Ok(v),
        Err(e) => Err(e.to_string()),
    }
}

/// Settings shared by every subcommand. Flags override `ACL_*` variables,
/// which override the defaults.
#[derive(Debug, Clone, Args)]
pub struct Common {
    #[arg(long, global = true, env = "ACL_LSTORE", default_value = "adcl.lstore")]
    pub lstore: PathBuf,
    #[arg(long, global = true, env = "ACL_KSTORE", default_value = "adcl.kstore")]
    pub kstore: PathBuf,
    #[arg(long, global = true, env = "ACL_INIT_STATE", default_value = "adcl.init")]
    pub init_state: PathBuf,
    /// Expected spacing of state-controlled key updates.
    #[arg(long, global = true, env = "ACL_M", default_value_t = 1 << 14, value_parser = positive)]
    pub m: u64,
    /// Cache capacity in records.
    #[arg(long, global = true, env = "ACL_CS", default_value_t = 1 << 14, value_parser = positive)]
    pub cs: u64,
    #[arg(long, global = true, env = "ACL_CF", value_enum, default_value_t = CfArg::Hash)]
    pub cf: CfArg,
    /// Probability that a key being committed is lost in a crash.
    #[arg(long, global = true, env = "ACL_ALPHA", default_value_t = 0.5)]
    pub alpha: f64,
    #[arg(long, global = true, env = "ACL_TRIALS", default_value_t = 1000, value_parser = positive)]
    pub trials: u64,
    /// Seed for key generation and simulations. `init` draws fresh entropy
    /// when absent; the simulators default to 0.
    #[arg(long, global = true, env = "ACL_SEED")]
    pub seed: Option<u64>,
    /// Receive events as UDP datagrams on this address.
    #[arg(long, global = true, env = "ACL_UDP")]
    pub udp: Option<SocketAddr>,
    /// Overwrite existing log files on `init`.
    #[arg(long, global = true)]
    pub force: bool,
}

impl Common {
    pub fn cf_params(&self) -> CfParams {
        CfParams::new(self.cf.into(), self.m).expect("m validated by the parser")
    }

    fn check_paths(&self) -> Result<(), Failure> {
        let (l, k, i) = (&self.lstore, &self.kstore, &self.init_state);
        if l == k || l == i || k == i {
            return Err(Failure::Usage("--lstore, --kstore and --init-state must be distinct".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum StrategyArg {
    Truncate,
    RewindKeep,
    RewindErase,
    Modify,
    TotalDeletion,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SchemeArg {
    Ours,
    Slic,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Create a fresh log along with the verifier's secret state.
    Init,
    /// Log one event per input line, or per datagram with --udp.
    Append {
        /// Input file; standard input when absent or "-".
        #[arg(long)]
        input: Option<PathBuf>,
        /// Stop after this many events.
        #[arg(long)]
        max_events: Option<u64>,
    },
    /// Check the log against the verifier state and print a JSON report.
    Verify,
    /// Crash fresh logs at random points and verify what is left.
    CrashSim {
        /// Largest number of events logged before a crash.
        #[arg(long, default_value_t = 1000, value_parser = positive)]
        events: u64,
    },
    /// Play the adversary game over a list of truncation depths.
    AttackBench {
        #[arg(long, value_delimiter = ',', default_values_t = [0u64, 16, 64, 128])]
        ell: Vec<u64>,
        #[arg(long, value_enum, default_value_t = StrategyArg::Truncate)]
        strategy: StrategyArg,
        #[arg(long, value_enum, default_value_t = SchemeArg::Ours)]
        scheme: SchemeArg,
        /// Events logged before compromise; defaults to 2cs+ℓ+m.
        #[arg(long)]
        events: Option<u64>,
        /// Dummy entries for the permuting baseline.
        #[arg(long, default_value_t = 256, value_parser = positive)]
        lambda: u64,
        /// Hide intermediate states from the adversary.
        #[arg(long)]
        non_adaptive: bool,
    },
    /// Time our logger against the permuting baseline and a plain writer.
    Bench {
        #[arg(long, default_value_t = 1 << 20, value_parser = positive)]
        events: u64,
        #[arg(long, default_value_t = 160)]
        message_len: usize,
        #[arg(long, default_value_t = 1 << 15, value_parser = positive)]
        lambda: u64,
    },
}

#[derive(Debug, Parser)]
#[command(name = "adcl", version, about = "Crash-tolerant forward-secure logging")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

fn run(cli: Cli) -> Result<(), Failure> {
    let c = &cli.common;
    match cli.command {
        Command::Init => {
            c.check_paths()?;
            commands::init(c)
        }
        Command::Append { input, max_events } => {
            c.check_paths()?;
            commands::append(c, input.as_deref(), max_events)
        }
        Command::Verify => {
            c.check_paths()?;
            commands::verify(c)
        }
        Command::CrashSim { events } => commands::crash_sim(c, events),
        Command::AttackBench { ell, strategy, scheme, events, lambda, non_adaptive } => {
            commands::attack_bench(c, &commands::Grid { ell, strategy, scheme, events, lambda, non_adaptive })
        }
        Command::Bench { events, message_len, lambda } => commands::bench(c, events, message_len, lambda),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("adcl: {f}");
            ExitCode::from(f.code())
        }
    }
}
