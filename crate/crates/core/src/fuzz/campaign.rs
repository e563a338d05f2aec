use std::collections::hash_map::DefaultHasher;
use std::collections::{BTreeMap, HashSet};
use std::fmt::Write as _;
use std::fs;
use std::hash::{Hash, Hasher};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::mpsc::{self, Receiver, Sender};
use std::thread;
use std::time::{Duration, Instant};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::coverage::{has_new_bits, write_bitmap, NewBits};
use crate::oracle::{decode_report, DecodeReport};
use crate::sim::{Device, FaultKind, RunOutcome};
use crate::trace::RawTrace;

use super::mutate::{deterministic, deterministic_count, havoc};
use super::queue::{Queue, Testcase};
use super::run::{analyze, capture, run_one, Capture, DirectLink, Load, PhaseTimings, RunResult, TraceLink};
use super::{FuzzConfig, FuzzError};

#[derive(Debug, Clone, Default, PartialEq)]
pub struct CampaignStats {
    /// Completed runs; equals `ok + crashes + hangs`.
    pub executions: u64,
    pub ok: u64,
    pub crashes: u64,
    pub hangs: u64,
    pub paths_total: u64,
    pub unique_crashes: u64,
    pub unique_hangs: u64,
    /// Trace captures lost to decode failures.
    pub faulty_cycles: u64,
    pub timings: PhaseTimings,
    pub elapsed: Duration,
    pub execs_per_sec: f64,
    pub seed: u64,
}

impl CampaignStats {
    /// `key=value` lines as written to `fuzzer_stats`.
    pub fn render(&self) -> String {
        let us = |d: Duration| d.as_micros();
        let mut s = String::new();
        let _ = writeln!(s, "executions={}", self.executions);
        let _ = writeln!(s, "execs_per_sec={:.2}", self.execs_per_sec);
        let _ = writeln!(s, "paths_total={}", self.paths_total);
        let _ = writeln!(s, "unique_crashes={}", self.unique_crashes);
        let _ = writeln!(s, "unique_hangs={}", self.unique_hangs);
        let _ = writeln!(s, "total_crashes={}", self.crashes);
        let _ = writeln!(s, "total_hangs={}", self.hangs);
        let _ = writeln!(s, "faulty_cycles={}", self.faulty_cycles);
        let _ = writeln!(s, "phase_reset2start_us={}", us(self.timings.reset_to_start));
        let _ = writeln!(s, "phase_starttrace_us={}", us(self.timings.start_trace));
        let _ = writeln!(s, "phase_start2end_us={}", us(self.timings.start_to_end));
        let _ = writeln!(s, "phase_stoptrace_us={}", us(self.timings.stop_trace));
        let _ = writeln!(s, "phase_analysis_us={}", us(self.timings.analysis));
        let _ = writeln!(s, "elapsed_us={}", us(self.elapsed));
        let _ = writeln!(s, "seed={}", self.seed);
        s
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CrashRecord {
    pub testcase: Testcase,
    pub kind: FaultKind,
    pub at: u32,
}

#[derive(Debug, Clone)]
pub struct CampaignResult {
    pub stats: CampaignStats,
    pub queue: Vec<Testcase>,
    pub crashes: Vec<CrashRecord>,
    pub hangs: Vec<Testcase>,
    pub global_bitmap: Vec<u8>,
}

struct Output {
    root: PathBuf,
}

impl Output {
    fn create(root: &Path) -> std::io::Result<Self> {
        for sub in ["queue", "crashes", "hangs"] {
            fs::create_dir_all(root.join(sub))?;
        }
        Ok(Self { root: root.to_path_buf() })
    }

    fn write(&self, rel: &str, data: &[u8]) -> std::io::Result<()> {
        fs::write(self.root.join(rel), data)
    }
}

struct Campaign<'a> {
    config: &'a FuzzConfig,
    capacity: usize,
    rng: ChaCha8Rng,
    queue: Queue,
    global: Vec<u8>,
    crash_keys: HashSet<(FaultKind, u32)>,
    hang_keys: HashSet<u64>,
    crashes: Vec<CrashRecord>,
    hangs: Vec<Testcase>,
    stats: CampaignStats,
    output: Option<Output>,
    start: Instant,
}

fn bitmap_hash(bitmap: &[u8]) -> u64 {
    let mut h = DefaultHasher::new();
    bitmap.hash(&mut h);
    h.finish()
}

impl<'a> Campaign<'a> {
    fn new(config: &'a FuzzConfig, capacity: usize) -> Result<Self, FuzzError> {
        let output = match &config.out_dir {
            Some(dir) => Some(Output::create(dir)?),
            None => None,
        };
        Ok(Self {
            config,
            capacity,
            rng: ChaCha8Rng::seed_from_u64(config.seed),
            queue: Queue::new(config.map_size.bytes()),
            global: vec![0; config.map_size.bytes()],
            crash_keys: HashSet::new(),
            hang_keys: HashSet::new(),
            crashes: Vec::new(),
            hangs: Vec::new(),
            stats: CampaignStats {
                seed: config.seed,
                ..CampaignStats::default()
            },
            output,
            start: Instant::now(),
        })
    }

    fn limit_reached(&self) -> bool {
        self.config.max_execs.is_some_and(|m| self.stats.executions >= m)
            || self.config.duration.is_some_and(|d| self.start.elapsed() >= d)
    }

    fn new_testcase(&self, data: Vec<u8>, parent: Option<usize>, executed: u64) -> Testcase {
        let parent = parent.map(|p| &self.queue.entries[p].testcase);
        Testcase {
            id: 0,
            parent: parent.map(|p| p.id),
            data,
            found_at: self.stats.executions,
            depth: parent.map_or(0, |p| p.depth + 1),
            executed,
        }
    }

    /// Folds one completed run into the campaign. `force` queues an `Ok` run
    /// even without new coverage.
    fn evaluate(
        &mut self,
        data: Vec<u8>,
        parent: Option<usize>,
        run: RunResult,
        force: bool,
    ) -> Result<(), FuzzError> {
        self.stats.executions += 1;
        self.stats.faulty_cycles += run.retried as u64;
        self.stats.timings.add(&run.timings);
        match run.outcome {
            RunOutcome::Ok => {
                self.stats.ok += 1;
                let new = has_new_bits(&mut self.global, &run.bitmap)?;
                if new != NewBits::NoNew || force {
                    let mut tc = self.new_testcase(data, parent, run.executed);
                    tc.id = self.queue.len() as u64;
                    if let Some(out) = &self.output {
                        out.write(&format!("queue/id_{:06}", tc.id), &tc.data)?;
                    }
                    self.queue.push(tc, &run.bitmap);
                }
            }
            RunOutcome::Crash { kind, at } => {
                self.stats.crashes += 1;
                if self.crash_keys.insert((kind, at)) {
                    let mut tc = self.new_testcase(data, parent, run.executed);
                    tc.id = self.crashes.len() as u64;
                    if let Some(out) = &self.output {
                        out.write(&format!("crashes/id_{:06}_{kind}_0x{at:08X}", tc.id), &tc.data)?;
                    }
                    self.crashes.push(CrashRecord { testcase: tc, kind, at });
                }
            }
            RunOutcome::Hang { .. } => {
                self.stats.hangs += 1;
                if self.hang_keys.insert(bitmap_hash(&run.bitmap)) {
                    let mut tc = self.new_testcase(data, parent, run.executed);
                    tc.id = self.hangs.len() as u64;
                    if let Some(out) = &self.output {
                        out.write(&format!("hangs/id_{:06}", tc.id), &tc.data)?;
                    }
                    self.hangs.push(tc);
                }
            }
        }
        Ok(())
    }

    /// Next round of mutants for queue entry `idx`: a slice of the
    /// deterministic walk until it is exhausted, havoc afterwards.
    fn make_batch(&mut self, idx: usize) -> Vec<Vec<u8>> {
        let batch = self.config.batch.max(1);
        let entry = &mut self.queue.entries[idx];
        entry.fuzzed = true;
        if !entry.det_done {
            let count = deterministic_count(entry.testcase.data.len());
            let end = (entry.det_cursor + batch).min(count);
            let out: Vec<Vec<u8>> = (entry.det_cursor..end)
                .filter_map(|i| deterministic(&entry.testcase.data, i))
                .collect();
            entry.det_cursor = end;
            entry.det_done = end == count;
            if !out.is_empty() {
                return out;
            }
        }
        let data = entry.testcase.data.clone();
        (0..batch).map(|_| havoc(&data, &mut self.rng, self.capacity)).collect()
    }

    fn run_seeds(
        &mut self,
        device: &mut Device,
        seeds: &[Vec<u8>],
        link: &mut dyn TraceLink,
    ) -> Result<(), FuzzError> {
        // Fallback queue entry when every seed crashes or hangs.
        let mut fallback = None;
        for seed in seeds {
            match run_one(device, seed, self.config, link) {
                Ok(run) => {
                    let first = self.queue.len() == 0 && run.outcome.is_ok();
                    if fallback.is_none() {
                        fallback = Some((seed.clone(), run.executed, run.bitmap.clone()));
                    }
                    self.evaluate(seed.clone(), None, run, first)?;
                }
                Err(FuzzError::FaultyCycle(_)) => self.stats.faulty_cycles += 2,
                Err(e) => return Err(e),
            }
        }
        if self.queue.len() == 0 {
            let (data, executed, bitmap) = fallback.ok_or(FuzzError::NoUsableSeed)?;
            let tc = self.new_testcase(data, None, executed);
            if let Some(out) = &self.output {
                out.write("queue/id_000000", &tc.data)?;
            }
            self.queue.push(tc, &bitmap);
        }
        Ok(())
    }

    fn main_loop(
        &mut self,
        mut exec_batch: impl FnMut(&mut Self, usize, Vec<Vec<u8>>) -> Result<(), FuzzError>,
    ) -> Result<(), FuzzError> {
        while !self.limit_reached() {
            let idx = self.queue.next(&mut self.rng);
            let batch = self.make_batch(idx);
            exec_batch(self, idx, batch)?;
        }
        Ok(())
    }

    fn finish(mut self) -> Result<CampaignResult, FuzzError> {
        let stats = &mut self.stats;
        stats.paths_total = self.queue.len() as u64;
        stats.unique_crashes = self.crashes.len() as u64;
        stats.unique_hangs = self.hangs.len() as u64;
        stats.elapsed = self.start.elapsed();
        let secs = stats.elapsed.as_secs_f64();
        stats.execs_per_sec = if secs > 0.0 { stats.executions as f64 / secs } else { 0.0 };
        if let Some(out) = &self.output {
            out.write("fuzzer_stats", stats.render().as_bytes())?;
            write_bitmap(&out.root.join("global_bitmap.bin"), &self.global, self.config.exception_mode)?;
        }
        Ok(CampaignResult {
            stats: self.stats,
            queue: self.queue.entries.into_iter().map(|e| e.testcase).collect(),
            crashes: self.crashes,
            hangs: self.hangs,
            global_bitmap: self.global,
        })
    }
}

/// Runs a campaign from `seeds` until `max_execs` or `duration` is reached.
pub fn fuzz_loop(device: &mut Device, seeds: &[Vec<u8>], config: &FuzzConfig) -> Result<CampaignResult, FuzzError> {
    fuzz_loop_with_link(device, seeds, config, &mut DirectLink)
}

pub fn fuzz_loop_with_link(
    device: &mut Device,
    seeds: &[Vec<u8>],
    config: &FuzzConfig,
    link: &mut (dyn TraceLink + Send),
) -> Result<CampaignResult, FuzzError> {
    if seeds.is_empty() {
        return Err(FuzzError::NoSeeds);
    }
    if config.max_execs.is_none() && config.duration.is_none() {
        return Err(FuzzError::NoStopCondition);
    }
    let mut campaign = Campaign::new(config, device.slot_capacity())?;
    campaign.run_seeds(device, seeds, link)?;
    if config.pipelined {
        run_pipelined(&mut campaign, device, link)?;
    } else {
        campaign.main_loop(|c, parent, batch| {
            for data in batch {
                if c.limit_reached() {
                    break;
                }
                match run_one(device, &data, config, link) {
                    Ok(run) => c.evaluate(data, Some(parent), run, false)?,
                    Err(FuzzError::FaultyCycle(_)) => c.stats.faulty_cycles += 2,
                    Err(e) => return Err(e),
                }
            }
            Ok(())
        })?;
    }
    campaign.finish()
}

struct Job {
    seq: u64,
    data: Vec<u8>,
}

/// Owns the device. Stages the following job into the next slot before
/// starting the current one.
fn executor(
    device: &mut Device,
    link: &mut (dyn TraceLink + Send),
    jobs: Receiver<Job>,
    captures: Sender<(u64, Result<Capture, FuzzError>)>,
    config: &FuzzConfig,
    stop: &AtomicBool,
) {
    let mut staged: Option<Job> = None;
    loop {
        let (job, promote) = match staged.take() {
            Some(job) => (job, true),
            None => match jobs.recv() {
                Ok(job) => (job, false),
                Err(_) => return,
            },
        };
        if stop.load(Ordering::Relaxed) {
            return;
        }
        let next = jobs.try_recv().ok();
        let load = if promote { Load::Promote } else { Load::Current(&job.data) };
        let result = capture(device, load, next.as_ref().map(|j| &j.data[..]), config, link);
        staged = next;
        if captures.send((job.seq, result)).is_err() {
            return;
        }
    }
}

fn analyzer(
    captures: Receiver<(u64, Result<Capture, FuzzError>)>,
    results: Sender<(u64, Result<RunResult, FuzzError>)>,
    config: &FuzzConfig,
) {
    for (seq, captured) in captures {
        let result = captured.and_then(|mut cap| {
            let bitmap = analyze(&mut cap, config).map_err(FuzzError::FaultyCycle)?;
            Ok(RunResult {
                outcome: cap.outcome,
                bitmap,
                trace: cap.trace,
                executed: cap.executed,
                timings: cap.timings,
                retried: false,
            })
        });
        if results.send((seq, result)).is_err() {
            return;
        }
    }
}

fn run_pipelined(
    campaign: &mut Campaign<'_>,
    device: &mut Device,
    link: &mut (dyn TraceLink + Send),
) -> Result<(), FuzzError> {
    let config = campaign.config;
    let stop = AtomicBool::new(false);
    thread::scope(|s| {
        let (job_tx, job_rx) = mpsc::channel();
        let (cap_tx, cap_rx) = mpsc::channel();
        let (res_tx, res_rx) = mpsc::channel();
        let stop = &stop;
        s.spawn(move || executor(device, link, job_rx, cap_tx, config, stop));
        s.spawn(move || analyzer(cap_rx, res_tx, config));

        let mut arrived: BTreeMap<u64, Result<RunResult, FuzzError>> = BTreeMap::new();
        let mut wait = |seq: u64| -> Result<RunResult, FuzzError> {
            loop {
                if let Some(r) = arrived.remove(&seq) {
                    return r;
                }
                match res_rx.recv() {
                    Ok((k, r)) => {
                        arrived.insert(k, r);
                    }
                    Err(_) => unreachable!("pipeline workers outlive the coordinator"),
                }
            }
        };
        let mut next_seq = 0u64;
        let result = campaign.main_loop(|c, parent, batch| {
            let first = next_seq;
            for data in &batch {
                let _ = job_tx.send(Job { seq: next_seq, data: data.clone() });
                next_seq += 1;
            }
            for (k, data) in batch.into_iter().enumerate() {
                if c.limit_reached() {
                    break;
                }
                let seq = first + k as u64;
                match wait(seq) {
                    Ok(run) => c.evaluate(data, Some(parent), run, false)?,
                    Err(FuzzError::FaultyCycle(_)) => {
                        let _ = job_tx.send(Job { seq, data: data.clone() });
                        match wait(seq) {
                            Ok(mut run) => {
                                run.retried = true;
                                c.evaluate(data, Some(parent), run, false)?;
                            }
                            Err(FuzzError::FaultyCycle(_)) => c.stats.faulty_cycles += 2,
                            Err(e) => return Err(e),
                        }
                    }
                    Err(e) => return Err(e),
                }
            }
            Ok(())
        });
        stop.store(true, Ordering::Relaxed);
        drop(job_tx);
        result
    })
}

#[derive(Debug, Clone)]
pub struct Replay {
    pub outcome: RunOutcome,
    pub bitmap: Vec<u8>,
    pub trace: RawTrace,
    pub report: DecodeReport,
}

/// Re-runs one input and decodes its trace for inspection.
pub fn replay(device: &mut Device, data: &[u8], config: &FuzzConfig) -> Result<Replay, FuzzError> {
    let run = run_one(device, data, config, &mut DirectLink)?;
    let lcsaj_only = !config.trace.direct_branch_packets;
    let report = decode_report(device.image(), &run.trace.0, config.exception_mode, lcsaj_only);
    Ok(Replay {
        outcome: run.outcome,
        bitmap: run.bitmap,
        trace: run.trace,
        report,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::programs;
    use crate::sim::assemble;

    fn config(max_execs: u64, pipelined: bool) -> FuzzConfig {
        FuzzConfig {
            max_execs: Some(max_execs),
            pipelined,
            seed: 7,
            ..FuzzConfig::default()
        }
    }

    fn campaign(src: &str, seeds: &[&[u8]], cfg: &FuzzConfig) -> CampaignResult {
        let mut d = Device::new(assemble(src).unwrap());
        let seeds: Vec<Vec<u8>> = seeds.iter().map(|s| s.to_vec()).collect();
        fuzz_loop(&mut d, &seeds, cfg).unwrap()
    }

    #[test]
    fn branch_demo_finds_second_path() {
        let r = campaign(programs::BRANCH_DEMO, &[&[0]], &config(10_000, false));
        assert_eq!(r.stats.paths_total, 2);
        assert_eq!(r.stats.executions, 10_000);
        assert_eq!(r.stats.executions, r.stats.ok + r.stats.crashes + r.stats.hangs);
    }

    #[test]
    fn unconditional_program_has_one_path() {
        let r = campaign(programs::UNCONDITIONAL, &[b"x"], &config(2_000, true));
        assert_eq!(r.stats.paths_total, 1);
    }

    #[test]
    fn pipelined_matches_serial() {
        let serial = campaign(programs::BUG, &[b"BUG?"], &config(3_000, false));
        let piped = campaign(programs::BUG, &[b"BUG?"], &config(3_000, true));
        assert_eq!(serial.queue, piped.queue);
        assert_eq!(serial.crashes, piped.crashes);
        assert_eq!(serial.global_bitmap, piped.global_bitmap);
        assert_eq!(serial.stats.executions, piped.stats.executions);
        assert!(serial.stats.unique_crashes >= 1);
    }

    #[test]
    fn rejects_missing_inputs() {
        let mut d = Device::new(assemble(programs::UNCONDITIONAL).unwrap());
        assert!(matches!(fuzz_loop(&mut d, &[], &config(1, false)), Err(FuzzError::NoSeeds)));
        let cfg = FuzzConfig::default();
        assert!(matches!(fuzz_loop(&mut d, &[vec![]], &cfg), Err(FuzzError::NoStopCondition)));
    }
}
