//! The fuzzing manager: queue, mutation, the staged execute/analyze
//! pipeline, crash and hang triage, and campaign persistence.

mod campaign;
mod mutate;
mod queue;
mod run;

use std::io;
use std::path::PathBuf;
use std::time::Duration;

use thiserror::Error;

use crate::coverage::{CoverageError, ExceptionFilterMode, MapSize};
use crate::sim::{InterruptSchedule, SimError, TraceConfig, DEFAULT_BUDGET};
use crate::trace::DecodeError;

pub use campaign::{fuzz_loop, fuzz_loop_with_link, replay, CampaignResult, CampaignStats, CrashRecord, Replay};
pub use mutate::{deterministic, deterministic_count, havoc, mutate, Stage, ARITH_MAX, HAVOC_STACK_POW2};
pub use queue::Testcase;
pub use run::{run_one, DirectLink, PhaseTimings, RunResult, TraceLink};

/// Mutants generated per scheduling round of one queue entry.
pub const DEFAULT_BATCH: usize = 256;

#[derive(Debug, Error)]
pub enum FuzzError {
    #[error("at least one seed is required")]
    NoSeeds,
    #[error("every seed run was lost to trace decode failures")]
    NoUsableSeed,
    #[error("campaign needs a duration or an execution limit")]
    NoStopCondition,
    #[error("trace lost twice: {0}")]
    FaultyCycle(DecodeError),
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error(transparent)]
    Coverage(#[from] CoverageError),
    #[error(transparent)]
    Io(#[from] io::Error),
}

#[derive(Debug, Clone)]
pub struct FuzzConfig {
    pub map_size: MapSize,
    /// Instruction budget per run; exceeding it is a hang.
    pub budget: u64,
    pub exception_mode: ExceptionFilterMode,
    pub trace: TraceConfig,
    pub interrupt: Option<InterruptSchedule>,
    /// Mutation RNG seed.
    pub seed: u64,
    /// Where to persist the campaign, if anywhere.
    pub out_dir: Option<PathBuf>,
    pub max_execs: Option<u64>,
    pub duration: Option<Duration>,
    /// Overlap staging, execution and analysis on separate threads.
    pub pipelined: bool,
    pub batch: usize,
}

impl Default for FuzzConfig {
    fn default() -> Self {
        Self {
            map_size: MapSize::default(),
            budget: DEFAULT_BUDGET,
            exception_mode: ExceptionFilterMode::Discard,
            trace: TraceConfig::default(),
            interrupt: None,
            seed: 0,
            out_dir: None,
            max_execs: None,
            duration: None,
            pipelined: true,
            batch: DEFAULT_BATCH,
        }
    }
}
