//! Command-line front end: `fuzz`, `replay`, `decode`, `bench`, `asm`.

use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use clap::{Args, Parser, Subcommand};

use crate::coverage::{count_edges, trace_to_bitmap, ExceptionFilterMode, MapSize};
use crate::fuzz::{fuzz_loop, replay, FuzzConfig};
use crate::oracle::{decode_report, raw_trace_to_block_bitmap};
use crate::sim::{assemble, parse_number, Device, Filter, InterruptSchedule, ProgramImage, Slot, TraceConfig, DEFAULT_BUDGET};

pub const EXIT_OK: i32 = 0;
pub const EXIT_FAILURE: i32 = 1;
pub const EXIT_USAGE: i32 = 2;

#[derive(Debug, Parser)]
#[command(name = "etmfuzz", version, about = "Trace-guided fuzzing for MCU-style programs")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run a fuzzing campaign.
    Fuzz(FuzzArgs),
    /// Re-run one input and print its outcome and decoded trace.
    Replay(ReplayArgs),
    /// Decode a raw trace file against a program.
    Decode(DecodeArgs),
    /// Compare end-to-end throughput of the coverage pipelines.
    Bench(BenchArgs),
    /// Assemble a program.
    Asm(AsmArgs),
}

#[derive(Debug, Args)]
pub struct TargetArgs {
    /// Assembly source of the target program.
    #[arg(long)]
    pub program: PathBuf,
    /// Trace filter: `addr:START:END`, `trig:START:STOP` or `data:ADDR:VALUE`.
    /// Numbers or program symbols. Repeatable.
    #[arg(long = "filter")]
    pub filters: Vec<String>,
    /// Periodic interrupt as `PERIOD:NUMBER`.
    #[arg(long)]
    pub irq: Option<String>,
    /// Instruction budget per run.
    #[arg(long, default_value_t = DEFAULT_BUDGET)]
    pub budget: u64,
}

#[derive(Debug, Args)]
pub struct FuzzArgs {
    #[command(flatten)]
    pub target: TargetArgs,
    #[arg(long)]
    pub seeds: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Wall-clock limit in seconds.
    #[arg(long)]
    pub duration: Option<f64>,
    #[arg(long)]
    pub max_execs: Option<u64>,
    #[arg(long, default_value_t = 65536)]
    pub map_size: u64,
    #[arg(long, default_value = "discard")]
    pub exc: ExceptionFilterMode,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Disable the staged execution pipeline.
    #[arg(long)]
    pub serial: bool,
}

#[derive(Debug, Args)]
pub struct ReplayArgs {
    #[command(flatten)]
    pub target: TargetArgs,
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long, default_value_t = 65536)]
    pub map_size: u64,
    #[arg(long, default_value = "discard")]
    pub exc: ExceptionFilterMode,
}

#[derive(Debug, Args)]
pub struct DecodeArgs {
    #[arg(long)]
    pub program: PathBuf,
    #[arg(long)]
    pub trace: PathBuf,
    /// Skip full reconstruction; print only blocks taken straight from packets.
    #[arg(long)]
    pub lcsaj_only: bool,
    #[arg(long, default_value = "keep")]
    pub exc: ExceptionFilterMode,
}

#[derive(Debug, Args)]
pub struct BenchArgs {
    #[command(flatten)]
    pub target: TargetArgs,
    /// Directory of input files.
    #[arg(long)]
    pub corpus: PathBuf,
    /// Measurement time per pipeline is `trials × trial-ms`.
    #[arg(long, default_value_t = 5)]
    pub trials: u32,
    /// Milliseconds per trial.
    #[arg(long, default_value_t = 200)]
    pub trial_ms: u64,
}

#[derive(Debug, Args)]
pub struct AsmArgs {
    #[arg(long = "in")]
    pub input: PathBuf,
    /// Only validate; print nothing on success.
    #[arg(long)]
    pub check: bool,
}

/// Failure carrying its exit code.
#[derive(Debug)]
pub struct CliError {
    pub code: i32,
    pub message: String,
}

fn usage(message: impl Into<String>) -> CliError {
    CliError {
        code: EXIT_USAGE,
        message: message.into(),
    }
}

fn failure(message: impl Into<String>) -> CliError {
    CliError {
        code: EXIT_FAILURE,
        message: message.into(),
    }
}

/// Parses and runs a command line, writing to the given streams. Returns the
/// process exit code.
pub fn run<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let text = e.render().to_string();
            let _ = if e.use_stderr() { err.write_all(text.as_bytes()) } else { out.write_all(text.as_bytes()) };
            return code;
        }
    };
    match execute(cli.command, out) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            let _ = writeln!(err, "error: {}", e.message);
            e.code
        }
    }
}

fn execute(command: Command, out: &mut dyn Write) -> Result<(), CliError> {
    match command {
        Command::Fuzz(a) => cmd_fuzz(a, out),
        Command::Replay(a) => cmd_replay(a, out),
        Command::Decode(a) => cmd_decode(a, out),
        Command::Bench(a) => cmd_bench(a, out),
        Command::Asm(a) => cmd_asm(a, out),
    }
}

fn io_failure(e: std::io::Error) -> CliError {
    failure(e.to_string())
}

fn load_program(path: &Path) -> Result<ProgramImage, CliError> {
    let src = fs::read_to_string(path).map_err(|e| usage(format!("{}: {e}", path.display())))?;
    assemble(&src).map_err(|e| usage(format!("{}: {e}", path.display())))
}

fn resolve(image: &ProgramImage, token: &str) -> Result<u32, CliError> {
    if let Some(addr) = image.symbol(token) {
        return Ok(addr);
    }
    parse_number(token)
        .and_then(|n| u32::try_from(n).ok())
        .ok_or_else(|| usage(format!("`{token}` is neither a number nor a symbol")))
}

/// Parses `addr:S:E`, `trig:S:E` or `data:ADDR:VAL`.
pub fn parse_filter(image: &ProgramImage, spec: &str) -> Result<Filter, CliError> {
    let parts: Vec<&str> = spec.split(':').collect();
    let [kind, a, b] = parts[..] else {
        return Err(usage(format!("filter `{spec}` must have the form KIND:A:B")));
    };
    let (a, b) = (resolve(image, a)?, resolve(image, b)?);
    match kind {
        "addr" => Ok(Filter::AddressRange { start: a, end: b }),
        "trig" => Ok(Filter::InstrTrigger { start: a, stop: b }),
        "data" => Ok(Filter::DataTrigger { watch: a, value: b }),
        _ => Err(usage(format!("unknown filter kind `{kind}` (addr, trig, data)"))),
    }
}

fn trace_config(image: &ProgramImage, specs: &[String]) -> Result<TraceConfig, CliError> {
    let filters = specs.iter().map(|s| parse_filter(image, s)).collect::<Result<Vec<_>, _>>()?;
    let config = TraceConfig::with_filters(filters);
    config.validate().map_err(|e| usage(e.to_string()))?;
    Ok(config)
}

fn interrupt(image: &ProgramImage, spec: Option<&str>) -> Result<Option<InterruptSchedule>, CliError> {
    let Some(spec) = spec else { return Ok(None) };
    let (period, number) = spec
        .split_once(':')
        .and_then(|(p, n)| Some((p.parse::<u64>().ok()?, n.parse::<u8>().ok()?)))
        .ok_or_else(|| usage(format!("--irq `{spec}` must be PERIOD:NUMBER")))?;
    if period == 0 {
        return Err(usage("interrupt period must be at least 1"));
    }
    if !image.vector_table.contains_key(&number) {
        return Err(usage(format!("program has no vector for exception {number}")));
    }
    Ok(Some(InterruptSchedule { period, number }))
}

fn map_size(n: u64) -> Result<MapSize, CliError> {
    MapSize::new(n).map_err(|e| usage(e.to_string()))
}

/// Regular files of `dir`, sorted by name.
fn read_dir_files(dir: &Path) -> Result<Vec<(PathBuf, Vec<u8>)>, CliError> {
    let entries = fs::read_dir(dir).map_err(|e| usage(format!("{}: {e}", dir.display())))?;
    let mut paths: Vec<PathBuf> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_file())
        .collect();
    paths.sort();
    paths
        .into_iter()
        .map(|p| fs::read(&p).map(|d| (p, d)).map_err(io_failure))
        .collect()
}

fn cmd_fuzz(a: FuzzArgs, out: &mut dyn Write) -> Result<(), CliError> {
    let image = load_program(&a.target.program)?;
    let trace = trace_config(&image, &a.target.filters)?;
    let interrupt = interrupt(&image, a.target.irq.as_deref())?;
    let map_size = map_size(a.map_size)?;
    if a.duration.is_none() && a.max_execs.is_none() {
        return Err(usage("one of --duration or --max-execs is required"));
    }
    let duration = match a.duration {
        Some(s) if s.is_finite() && s >= 0.0 => Some(Duration::from_secs_f64(s)),
        Some(s) => return Err(usage(format!("invalid duration {s}"))),
        None => None,
    };
    let seeds: Vec<Vec<u8>> = read_dir_files(&a.seeds)?.into_iter().map(|(_, d)| d).collect();
    if seeds.is_empty() {
        return Err(usage(format!("{}: no seed files", a.seeds.display())));
    }
    let mut device = Device::new(image);
    if let Some(big) = seeds.iter().find(|s| s.len() > device.slot_capacity()) {
        return Err(usage(format!(
            "seed of {} bytes exceeds slot capacity {}",
            big.len(),
            device.slot_capacity()
        )));
    }
    let config = FuzzConfig {
        map_size,
        budget: a.target.budget,
        exception_mode: a.exc,
        trace,
        interrupt,
        seed: a.seed,
        out_dir: Some(a.out.clone()),
        max_execs: a.max_execs,
        duration,
        pipelined: !a.serial,
        ..FuzzConfig::default()
    };
    let result = fuzz_loop(&mut device, &seeds, &config).map_err(|e| failure(e.to_string()))?;
    out.write_all(result.stats.render().as_bytes()).map_err(io_failure)?;
    Ok(())
}

fn cmd_replay(a: ReplayArgs, out: &mut dyn Write) -> Result<(), CliError> {
    let image = load_program(&a.target.program)?;
    let config = FuzzConfig {
        map_size: map_size(a.map_size)?,
        budget: a.target.budget,
        exception_mode: a.exc,
        trace: trace_config(&image, &a.target.filters)?,
        interrupt: interrupt(&image, a.target.irq.as_deref())?,
        ..FuzzConfig::default()
    };
    let data = fs::read(&a.input).map_err(|e| usage(format!("{}: {e}", a.input.display())))?;
    let mut device = Device::new(image);
    if data.len() > device.slot_capacity() {
        return Err(usage(format!("input exceeds slot capacity {}", device.slot_capacity())));
    }
    let r = replay(&mut device, &data, &config).map_err(|e| failure(e.to_string()))?;
    let mut text = format!(
        "outcome: {}\nedges: {}\ntrace_bytes: {}\n",
        r.outcome,
        count_edges(&r.bitmap),
        r.trace.len()
    );
    text.push_str(&r.report.text());
    out.write_all(text.as_bytes()).map_err(io_failure)?;
    match r.report.error {
        Some(e) => Err(failure(e.to_string())),
        None => Ok(()),
    }
}

fn cmd_decode(a: DecodeArgs, out: &mut dyn Write) -> Result<(), CliError> {
    let image = load_program(&a.program)?;
    let raw = fs::read(&a.trace).map_err(|e| usage(format!("{}: {e}", a.trace.display())))?;
    let report = decode_report(&image, &raw, a.exc, a.lcsaj_only);
    out.write_all(report.text().as_bytes()).map_err(io_failure)?;
    match report.error {
        Some(e) => Err(failure(e.to_string())),
        None => Ok(()),
    }
}

fn cmd_asm(a: AsmArgs, out: &mut dyn Write) -> Result<(), CliError> {
    let image = load_program(&a.input)?;
    if a.check {
        return Ok(());
    }
    let mut text = String::new();
    for (addr, name) in image.symbols.iter().map(|(n, a)| (*a, n)).collect::<std::collections::BTreeMap<_, _>>() {
        text.push_str(&format!("; {name} = 0x{addr:08X}\n"));
    }
    for (n, addr) in &image.vector_table {
        text.push_str(&format!("; vector {n} -> 0x{addr:08X}\n"));
    }
    for (i, insn) in image.instructions.iter().enumerate() {
        text.push_str(&format!("0x{:08X}  {insn}\n", image.address_of(i)));
    }
    out.write_all(text.as_bytes()).map_err(io_failure)
}

/// Which coverage pipeline a bench trial exercises.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Pipeline {
    /// Blocks straight from packets, with the configured filters.
    Lcsaj,
    /// Full instruction-flow reconstruction, with the configured filters.
    FullReconstruction,
    /// Blocks straight from packets, trace filters off.
    LcsajUnfiltered,
}

impl Pipeline {
    pub const ALL: [Pipeline; 3] = [Pipeline::Lcsaj, Pipeline::FullReconstruction, Pipeline::LcsajUnfiltered];

    pub fn name(self) -> &'static str {
        match self {
            Pipeline::Lcsaj => "lcsaj",
            Pipeline::FullReconstruction => "full-reconstruction",
            Pipeline::LcsajUnfiltered => "lcsaj-unfiltered",
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct BenchOptions {
    pub trials: u32,
    pub trial_time: Duration,
    pub budget: u64,
    pub exception_mode: ExceptionFilterMode,
    pub map_size: MapSize,
}

impl Default for BenchOptions {
    fn default() -> Self {
        Self {
            trials: 5,
            trial_time: Duration::from_millis(200),
            budget: DEFAULT_BUDGET,
            exception_mode: ExceptionFilterMode::Discard,
            map_size: MapSize::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchReport {
    pub inputs: usize,
    /// Executions per second at the fastest corpus pass, indexed like
    /// [`Pipeline::ALL`].
    pub execs_per_sec: [f64; 3],
}

impl BenchReport {
    pub fn rate(&self, p: Pipeline) -> f64 {
        self.execs_per_sec[p as usize]
    }

    /// LCSAJ over full reconstruction.
    pub fn analysis_speedup(&self) -> f64 {
        self.rate(Pipeline::Lcsaj) / self.rate(Pipeline::FullReconstruction)
    }

    /// Filtered over unfiltered tracing.
    pub fn filter_speedup(&self) -> f64 {
        self.rate(Pipeline::Lcsaj) / self.rate(Pipeline::LcsajUnfiltered)
    }

    pub fn render(&self) -> String {
        let mut s = format!("{:<22}{:>16}\n", "pipeline", "execs/sec");
        for p in Pipeline::ALL {
            s.push_str(&format!("{:<22}{:>16.1}\n", p.name(), self.rate(p)));
        }
        s.push_str(&format!("speedup lcsaj/full-reconstruction: {:.2}x\n", self.analysis_speedup()));
        s.push_str(&format!("speedup filtered/unfiltered: {:.2}x\n", self.filter_speedup()));
        s
    }
}

/// One end-to-end execution: reset, load, run with trace, analysis.
fn bench_exec(device: &mut Device, input: &[u8], pipeline: Pipeline, opts: &BenchOptions) -> usize {
    device.reset();
    device.load_testcase(input, Slot::Current).expect("inputs checked against capacity");
    let report = device.run(opts.budget);
    let bitmap = match pipeline {
        Pipeline::Lcsaj | Pipeline::LcsajUnfiltered => {
            trace_to_bitmap(&report.trace.0, opts.exception_mode, opts.map_size).ok()
        }
        Pipeline::FullReconstruction => {
            raw_trace_to_block_bitmap(device.image(), &report.trace.0, opts.exception_mode, opts.map_size).ok()
        }
    };
    bitmap.map_or(0, |b| b.len())
}

/// Measures executions per second of the three pipelines over `corpus`.
///
/// Passes over the corpus are interleaved across pipelines and the fastest
/// pass of each pipeline is kept, which filters out scheduler noise and
/// drift. Roughly `trials × trial_time` is spent per pipeline.
pub fn bench(
    image: &ProgramImage,
    trace: &TraceConfig,
    interrupt: Option<InterruptSchedule>,
    corpus: &[Vec<u8>],
    opts: &BenchOptions,
) -> Result<BenchReport, CliError> {
    let mut devices = Vec::new();
    for p in Pipeline::ALL {
        let mut d = Device::new(image.clone());
        let cfg = match p {
            Pipeline::LcsajUnfiltered => TraceConfig::default(),
            _ => trace.clone(),
        };
        d.set_trace_config(cfg).map_err(|e| usage(e.to_string()))?;
        if let Some(s) = interrupt {
            d.set_interrupt_schedule(s.period, s.number).map_err(|e| usage(e.to_string()))?;
        }
        if corpus.iter().any(|c| c.len() > d.slot_capacity()) {
            return Err(usage("corpus input exceeds slot capacity"));
        }
        devices.push(d);
    }
    let total = opts.trial_time * opts.trials.max(1) * Pipeline::ALL.len() as u32;
    let mut best = [Duration::MAX; 3];
    let mut sink = 0usize;
    let start = Instant::now();
    let mut rounds = 0u32;
    while start.elapsed() < total || rounds == 0 {
        for (i, p) in Pipeline::ALL.into_iter().enumerate() {
            // Untimed pass first so the timed one does not pay for the
            // previous pipeline's cache footprint.
            for timed in [false, true] {
                let t = Instant::now();
                for input in corpus {
                    sink = sink.wrapping_add(bench_exec(&mut devices[i], input, p, opts));
                }
                if timed {
                    best[i] = best[i].min(t.elapsed());
                }
            }
        }
        rounds += 1;
    }
    std::hint::black_box(sink);
    let n = corpus.len() as f64;
    Ok(BenchReport {
        inputs: corpus.len(),
        execs_per_sec: best.map(|d| n / d.as_secs_f64().max(1e-9)),
    })
}

fn cmd_bench(a: BenchArgs, out: &mut dyn Write) -> Result<(), CliError> {
    let image = load_program(&a.target.program)?;
    let trace = trace_config(&image, &a.target.filters)?;
    let interrupt = interrupt(&image, a.target.irq.as_deref())?;
    let corpus: Vec<Vec<u8>> = read_dir_files(&a.corpus)?.into_iter().map(|(_, d)| d).collect();
    if corpus.is_empty() {
        return writeln!(out, "no inputs in {}", a.corpus.display()).map_err(io_failure);
    }
    let opts = BenchOptions {
        trials: a.trials,
        trial_time: Duration::from_millis(a.trial_ms),
        budget: a.target.budget,
        ..BenchOptions::default()
    };
    let report = bench(&image, &trace, interrupt, &corpus, &opts)?;
    out.write_all(report.render().as_bytes()).map_err(io_failure)
}
