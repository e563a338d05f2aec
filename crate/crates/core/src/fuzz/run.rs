use std::time::{Duration, Instant};

use crate::coverage::trace_to_bitmap;
use crate::sim::{Device, RunOutcome, Slot};
use crate::trace::{DecodeError, RawTrace};

use super::{FuzzConfig, FuzzError};

/// Cumulative time per sub-process of one fuzzing cycle.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct PhaseTimings {
    /// Reset plus getting the testcase into the current slot.
    pub reset_to_start: Duration,
    /// Arming the trace unit.
    pub start_trace: Duration,
    /// Target execution.
    pub start_to_end: Duration,
    /// Draining the captured trace over the link.
    pub stop_trace: Duration,
    /// Decoding and bitmap construction.
    pub analysis: Duration,
}

impl PhaseTimings {
    pub fn add(&mut self, other: &PhaseTimings) {
        self.reset_to_start += other.reset_to_start;
        self.start_trace += other.start_trace;
        self.start_to_end += other.start_to_end;
        self.stop_trace += other.stop_trace;
        self.analysis += other.analysis;
    }

    pub fn total(&self) -> Duration {
        self.reset_to_start + self.start_trace + self.start_to_end + self.stop_trace + self.analysis
    }
}

/// Path the raw trace takes from the device to the analyzer. Lets tests
/// model a lossy probe.
pub trait TraceLink {
    fn transfer(&mut self, trace: RawTrace) -> RawTrace;
}

/// Lossless link.
#[derive(Debug, Clone, Copy, Default)]
pub struct DirectLink;

impl TraceLink for DirectLink {
    fn transfer(&mut self, trace: RawTrace) -> RawTrace {
        trace
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RunResult {
    pub outcome: RunOutcome,
    pub bitmap: Vec<u8>,
    pub trace: RawTrace,
    /// Instructions retired.
    pub executed: u64,
    pub timings: PhaseTimings,
    /// Whether the first attempt was lost to a trace decode failure.
    pub retried: bool,
}

/// Device half of a cycle: everything up to and including trace capture.
#[derive(Debug, Clone)]
pub(crate) struct Capture {
    pub outcome: RunOutcome,
    pub trace: RawTrace,
    pub executed: u64,
    pub timings: PhaseTimings,
}

/// How the testcase reaches the current slot.
pub(crate) enum Load<'a> {
    Current(&'a [u8]),
    /// Already staged in the next slot.
    Promote,
}

pub(crate) fn capture(
    device: &mut Device,
    load: Load<'_>,
    stage: Option<&[u8]>,
    config: &FuzzConfig,
    link: &mut dyn TraceLink,
) -> Result<Capture, FuzzError> {
    let mut timings = PhaseTimings::default();

    let t = Instant::now();
    device.reset();
    match load {
        Load::Current(data) => device.load_testcase(data, Slot::Current)?,
        Load::Promote => device.swap_slots(),
    }
    timings.reset_to_start = t.elapsed();
    // Next slot is filled while this run is in flight.
    if let Some(next) = stage {
        device.load_testcase(next, Slot::Next)?;
    }

    let t = Instant::now();
    device.set_trace_config(config.trace.clone())?;
    match config.interrupt {
        Some(s) => device.set_interrupt_schedule(s.period, s.number)?,
        None => device.clear_interrupt_schedule(),
    }
    timings.start_trace = t.elapsed();

    let t = Instant::now();
    let report = device.run(config.budget);
    timings.start_to_end = t.elapsed();

    let t = Instant::now();
    let trace = link.transfer(report.trace);
    timings.stop_trace = t.elapsed();

    Ok(Capture {
        outcome: report.outcome,
        trace,
        executed: report.executed,
        timings,
    })
}

pub(crate) fn analyze(capture: &mut Capture, config: &FuzzConfig) -> Result<Vec<u8>, DecodeError> {
    let t = Instant::now();
    let bitmap = trace_to_bitmap(&capture.trace.0, config.exception_mode, config.map_size);
    capture.timings.analysis = t.elapsed();
    bitmap
}

/// One fuzzing cycle: reset, load, run with trace, build the local bitmap.
/// A trace that fails to decode is retried once; a second failure is
/// returned as [`FuzzError::FaultyCycle`].
pub fn run_one(
    device: &mut Device,
    data: &[u8],
    config: &FuzzConfig,
    link: &mut dyn TraceLink,
) -> Result<RunResult, FuzzError> {
    let mut retried = false;
    loop {
        let mut cap = capture(device, Load::Current(data), None, config, link)?;
        match analyze(&mut cap, config) {
            Ok(bitmap) => {
                return Ok(RunResult {
                    outcome: cap.outcome,
                    bitmap,
                    trace: cap.trace,
                    executed: cap.executed,
                    timings: cap.timings,
                    retried,
                })
            }
            Err(e) if retried => return Err(FuzzError::FaultyCycle(e)),
            Err(_) => retried = true,
        }
    }
}
