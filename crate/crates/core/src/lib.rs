//! Tamper-evident, forward-secure logging that survives ordinary crashes.
//!
//! A device keeps two key chains. The sequential chain evolves on every
//! event; the state-controlled chain evolves only when a keyed choice
//! function fires. Records are authenticated with whichever key is current,
//! and the verifier rebuilds both chains from the initial state to decide
//! whether a damaged log is the product of a crash or of an attacker.

pub mod crash;
pub mod crypto;
pub mod harness;
pub mod log;
pub mod perf;
pub mod recovery;
pub mod slic;

pub use crash::{normal_crash, stability_estimate, CrashParams, CrashedState};
pub use crypto::{CfParams, CfVariant, Key256, Tag256, Tweak};
pub use harness::{check_game, run_game, AdversaryMode, AttackStrategy, GameConfig, KStoreAction, TrialReport};
pub use log::{gen, gen_with_sink, DeviceState, InitMeta, InitialState, KStoreState, LogConfig, LogError, LogRecord};
pub use recovery::{recover, RecoverResult, RecoveredLog};
