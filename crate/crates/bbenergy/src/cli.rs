//! The `bbenergy` command line.
//!
//! Every failure class has its own exit status (see [`exit`]). Scalar flags
//! can also be set through `BBENERGY_*` environment variables.

use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use bbenergy_core::blockmap::BlockMapSet;
use bbenergy_core::{build_profile, ConfidenceSpec, Granularity, Profile, ProfileOptions};
use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::blockmap_io::{self, BlockMapError};
use crate::report::{build_report, render, Format};
use crate::scenario::{render_summary_text, simulate, Scenario, ScenarioError};
use crate::trace::{ns_to_s, resolve_samples, Trace, TraceError};

/// Process exit statuses.
pub mod exit {
    pub const OK: u8 = 0;
    pub const INTERNAL: u8 = 1;
    pub const USAGE: u8 = 2;
    pub const ATTACH: u8 = 3;
    pub const SENSOR: u8 = 4;
    pub const BLOCK_MAP: u8 = 5;
    /// The target died from a signal. The report is still written.
    pub const TARGET_CRASHED: u8 = 6;
    pub const MALFORMED_INPUT: u8 = 7;
    pub const OUTPUT: u8 = 8;
    /// Sampling stopped because the trace could not be written.
    pub const SAMPLING_ABORTED: u8 = 9;
}

#[derive(Debug)]
pub struct CliError {
    pub code: u8,
    pub msg: String,
}

impl CliError {
    fn new(code: u8, msg: impl std::fmt::Display) -> Self {
        CliError { code, msg: msg.to_string() }
    }
}

impl From<BlockMapError> for CliError {
    fn from(e: BlockMapError) -> Self {
        CliError::new(exit::BLOCK_MAP, e)
    }
}

impl From<TraceError> for CliError {
    fn from(e: TraceError) -> Self {
        CliError::new(exit::MALFORMED_INPUT, e)
    }
}

impl From<ScenarioError> for CliError {
    fn from(e: ScenarioError) -> Self {
        let code = match e {
            ScenarioError::Sim(_) => exit::INTERNAL,
            _ => exit::MALFORMED_INPUT,
        };
        CliError::new(code, e)
    }
}

#[derive(Debug, Parser)]
#[command(name = "bbenergy", version, about = "Sampling energy profiler for basic blocks")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Profile a running process or a new command.
    Profile(ProfileArgs),
    /// Rebuild a report from a recorded trace.
    Replay(ReplayArgs),
    /// Evaluate the estimators on a synthetic workload.
    Simulate(SimulateArgs),
    /// Print a block map built from a binary's function symbols.
    Symbols(SymbolsArgs),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum GranularityArg {
    Block,
    Combination,
}

impl From<GranularityArg> for Granularity {
    fn from(g: GranularityArg) -> Self {
        match g {
            GranularityArg::Block => Granularity::Block,
            GranularityArg::Combination => Granularity::Combination,
        }
    }
}

#[derive(Debug, Args)]
pub struct AnalysisArgs {
    /// Block map file (text or JSON); repeat for several modules.
    #[arg(long = "blockmap", value_name = "PATH")]
    pub blockmaps: Vec<PathBuf>,
    /// Use the function symbols of a binary as blocks.
    #[arg(long = "symbols-from", value_name = "BIN")]
    pub symbols_from: Vec<PathBuf>,
    /// Significance level of the confidence intervals.
    #[arg(long, default_value_t = 0.05, env = "BBENERGY_ALPHA")]
    pub alpha: f64,
    /// Attribute to single blocks, or to the blocks running together across threads.
    #[arg(long, value_enum, default_value_t = GranularityArg::Combination, env = "BBENERGY_GRANULARITY")]
    pub granularity: GranularityArg,
    /// Power domain reported in the main columns (default: the first seen).
    #[arg(long, value_name = "NAME")]
    pub domain: Option<String>,
    /// Report file; standard output when absent.
    #[arg(long, short)]
    pub output: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = Format::Text, env = "BBENERGY_FORMAT")]
    pub format: Format,
    /// Hide rows with fewer samples from text output.
    #[arg(long, default_value_t = 0)]
    pub min_samples: u64,
}

#[derive(Debug, Args)]
pub struct ProfileArgs {
    /// Attach to this process instead of starting one.
    #[arg(long, conflicts_with = "command")]
    pub pid: Option<i32>,
    /// Sampling period in milliseconds.
    #[arg(long, default_value_t = 10.0, env = "BBENERGY_PERIOD_MS")]
    pub period_ms: f64,
    /// Jitter bound as a fraction of the period, below 0.5.
    #[arg(long, default_value_t = 0.05, env = "BBENERGY_JITTER")]
    pub jitter: f64,
    /// Power source: rapl:DIR, meter:DOMAIN=PATH;unit=uw, counters:PATH;wrap=UJ,
    /// replay:PATH, mock:DOMAIN=WATTS, none, or auto (RAPL when present).
    #[arg(long, default_value = "auto", env = "BBENERGY_POWER_SOURCE")]
    pub power_source: String,
    /// Write the raw sample trace here.
    #[arg(long, value_name = "PATH")]
    pub record: Option<PathBuf>,
    /// Write every power reading to a power trace.
    #[arg(long, value_name = "PATH")]
    pub record_power: Option<PathBuf>,
    /// Core for the control loop; the target is kept off it.
    #[arg(long, env = "BBENERGY_PIN_CORE")]
    pub pin_core: Option<usize>,
    /// Stop sampling and detach after this many seconds.
    #[arg(long, value_name = "SECS")]
    pub max_duration: Option<f64>,
    /// Stop sampling and detach after this many samples.
    #[arg(long)]
    pub max_samples: Option<u64>,
    /// Seed of the schedule's random offsets.
    #[arg(long, env = "BBENERGY_SEED")]
    pub seed: Option<u64>,
    #[command(flatten)]
    pub analysis: AnalysisArgs,
    /// Command to run, after `--`.
    #[arg(last = true, value_name = "COMMAND")]
    pub command: Vec<String>,
}

#[derive(Debug, Args)]
pub struct ReplayArgs {
    /// Trace written by `profile --record` or `simulate --emit-trace`.
    #[arg(long)]
    pub trace: PathBuf,
    /// Execution time in seconds, for traces without one.
    #[arg(long, value_name = "SECS")]
    pub t_exec: Option<f64>,
    #[command(flatten)]
    pub analysis: AnalysisArgs,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum SummaryFormat {
    Json,
    Text,
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    /// Workload description (JSON).
    #[arg(long)]
    pub scenario: PathBuf,
    /// Independent sampling runs to pool for coverage.
    #[arg(long, default_value_t = 1)]
    pub replications: u64,
    #[arg(long, default_value_t = 0.05, env = "BBENERGY_ALPHA")]
    pub alpha: f64,
    /// Write the first replication's samples as a trace.
    #[arg(long, value_name = "PATH")]
    pub emit_trace: Option<PathBuf>,
    /// Write the scenario's block map.
    #[arg(long, value_name = "PATH")]
    pub emit_blockmap: Option<PathBuf>,
    /// Summary file; standard output when absent.
    #[arg(long, short)]
    pub output: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = SummaryFormat::Text)]
    pub format: SummaryFormat,
}

#[derive(Debug, Args)]
pub struct SymbolsArgs {
    pub binary: PathBuf,
    #[arg(long)]
    pub json: bool,
}

/// Parses `args` and runs the command.
pub fn main_with<I, T>(args: I) -> ExitCode
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { exit::USAGE } else { exit::OK });
        }
    };
    match run(cli) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("bbenergy: {}", e.msg);
            ExitCode::from(e.code)
        }
    }
}

pub fn run(cli: Cli) -> Result<u8, CliError> {
    match cli.command {
        Command::Profile(a) => cmd_profile(a),
        Command::Replay(a) => cmd_replay(a),
        Command::Simulate(a) => cmd_simulate(a),
        Command::Symbols(a) => cmd_symbols(a),
    }
}

fn confidence(alpha: f64) -> Result<ConfidenceSpec, CliError> {
    ConfidenceSpec::new(alpha).map_err(|_| CliError::new(exit::USAGE, format!("--alpha must be in (0, 1), got {alpha}")))
}

fn load_maps(a: &AnalysisArgs) -> Result<BlockMapSet, CliError> {
    let mut set = BlockMapSet::new();
    for p in &a.blockmaps {
        blockmap_io::load_blockmap(p, &mut set)?;
    }
    for p in &a.symbols_from {
        blockmap_io::load_symbols(p, &mut set)?;
    }
    Ok(set)
}

fn write_output(path: Option<&Path>, text: &str) -> Result<(), CliError> {
    let res = match path {
        Some(p) => std::fs::write(p, text).map_err(|e| (p.display().to_string(), e)),
        None => {
            let mut out = io::stdout().lock();
            out.write_all(text.as_bytes()).and_then(|_| out.flush()).map_err(|e| ("standard output".into(), e))
        }
    };
    res.map_err(|(what, e)| CliError::new(exit::OUTPUT, format!("cannot write {what}: {e}")))
}

/// Profile of a trace under the analysis options. Live runs and replays
/// both go through here, so the same trace gives the same report.
pub fn profile_trace(
    trace: &Trace,
    maps: &mut BlockMapSet,
    a: &AnalysisArgs,
    t_exec_override: Option<f64>,
) -> Result<Profile, CliError> {
    if trace.records().next().is_none() {
        return Err(TraceError::Empty.into());
    }
    let t_exec = match (t_exec_override, trace.t_exec_ns()) {
        (Some(t), _) => t,
        (None, Some(ns)) => ns_to_s(ns),
        (None, None) => return Err(TraceError::MissingTExec.into()),
    };
    let samples = resolve_samples(trace, maps)?;
    let mut opts = ProfileOptions::new(t_exec).confidence(confidence(a.alpha)?).granularity(a.granularity.into());
    if let Some(d) = &a.domain {
        opts.primary_domain =
            Some(d.parse().map_err(|e| CliError::new(exit::USAGE, format!("bad --domain {d:?}: {e}")))?);
    }
    build_profile(&samples, &opts).map_err(|e| CliError::new(exit::MALFORMED_INPUT, e))
}

fn emit_report(trace: &Trace, maps: &mut BlockMapSet, a: &AnalysisArgs, t_exec: Option<f64>) -> Result<(), CliError> {
    let profile = profile_trace(trace, maps, a, t_exec)?;
    let report = build_report(&profile, maps, Some(trace));
    write_output(a.output.as_deref(), &render(&report, a.format, a.min_samples))
}

fn cmd_replay(a: ReplayArgs) -> Result<u8, CliError> {
    if let Some(t) = a.t_exec {
        if !(t > 0.0 && t.is_finite()) {
            return Err(CliError::new(exit::USAGE, "--t-exec must be positive"));
        }
    }
    confidence(a.analysis.alpha)?;
    let mut maps = load_maps(&a.analysis)?;
    let trace = Trace::read(&a.trace)?;
    emit_report(&trace, &mut maps, &a.analysis, a.t_exec)?;
    Ok(exit::OK)
}

fn cmd_simulate(a: SimulateArgs) -> Result<u8, CliError> {
    let conf = confidence(a.alpha)?;
    if a.replications == 0 {
        return Err(CliError::new(exit::USAGE, "--replications must be at least 1"));
    }
    let scenario = Scenario::load(&a.scenario)?;
    let maps = scenario.block_map()?;
    if let Some(p) = &a.emit_blockmap {
        let all: Vec<_> = maps.maps().collect();
        let text = if p.extension().is_some_and(|e| e == "json") {
            blockmap_io::to_json(&all)
        } else {
            all.iter().map(|m| blockmap_io::to_text(m)).collect()
        };
        write_output(Some(p), &text)?;
    }
    let mut trace_text = None;
    let summary = simulate(&scenario, a.replications, conf, |rep, _| {
        if rep.index == 0 && a.emit_trace.is_some() {
            trace_text = Some(rep.to_trace(&maps).to_text());
        }
    })?;
    if let (Some(p), Some(text)) = (&a.emit_trace, &trace_text) {
        write_output(Some(p), text)?;
    }
    let text = match a.format {
        SummaryFormat::Json => {
            let mut s = serde_json::to_string_pretty(&summary).map_err(|e| CliError::new(exit::INTERNAL, e))?;
            s.push('\n');
            s
        }
        SummaryFormat::Text => render_summary_text(&summary),
    };
    write_output(a.output.as_deref(), &text)?;
    Ok(exit::OK)
}

fn cmd_symbols(a: SymbolsArgs) -> Result<u8, CliError> {
    let mut set = BlockMapSet::new();
    let id = blockmap_io::load_symbols(&a.binary, &mut set)?;
    let map = set.map(id).ok_or_else(|| CliError::new(exit::BLOCK_MAP, "no symbols"))?;
    let text = if a.json { blockmap_io::to_json(&[map]) } else { blockmap_io::to_text(map) };
    write_output(None, &text)?;
    Ok(exit::OK)
}

#[cfg(target_os = "linux")]
fn cmd_profile(a: ProfileArgs) -> Result<u8, CliError> {
    live::profile(a)
}

#[cfg(not(target_os = "linux"))]
fn cmd_profile(_: ProfileArgs) -> Result<u8, CliError> {
    Err(CliError::new(exit::ATTACH, "live profiling needs Linux"))
}

#[cfg(target_os = "linux")]
mod live {
    use super::*;
    use crate::power::{open_source, PowerSource, Recorder, SourceSpec, StaleGuard};
    use crate::sampler::affinity::pin_current_thread;
    use crate::sampler::{run_systematic, MonotonicClock, PtraceTarget, QueuedWriter, SamplerError, Tee};
    use crate::trace::{TraceLine, TraceSink};
    use bbenergy_core::schedule::SamplerConfig;

    const RAPL_PACKAGE: &str = "/sys/class/powercap/intel-rapl:0";

    fn sampler_config(a: &ProfileArgs) -> Result<SamplerConfig, CliError> {
        let usage = |m: String| CliError::new(exit::USAGE, m);
        if !(a.period_ms > 0.0 && a.period_ms.is_finite()) {
            return Err(usage(format!("--period-ms must be positive, got {}", a.period_ms)));
        }
        if !(0.0..0.5).contains(&a.jitter) {
            return Err(usage(format!("--jitter must be in [0, 0.5), got {}", a.jitter)));
        }
        let period_ns = (a.period_ms * 1e6).round() as u64;
        let max_duration_ns = match a.max_duration {
            Some(s) if !(s > 0.0 && s.is_finite()) => return Err(usage("--max-duration must be positive".into())),
            Some(s) => Some((s * 1e9).round() as u64),
            None => None,
        };
        let seed = a.seed.unwrap_or_else(|| {
            std::time::SystemTime::now().duration_since(std::time::UNIX_EPOCH).map_or(0, |d| d.as_nanos() as u64)
        });
        let cfg = SamplerConfig {
            period_ns,
            jitter_ns: (period_ns as f64 * a.jitter) as u64,
            first_offset_ns: None,
            pin_core: a.pin_core,
            max_samples: a.max_samples,
            max_duration_ns,
            seed,
        };
        cfg.validate().map_err(|e| usage(e.to_string()))?;
        Ok(cfg)
    }

    fn power_spec(text: &str) -> Result<SourceSpec, CliError> {
        let text = if text == "auto" {
            if Path::new(RAPL_PACKAGE).join("energy_uj").exists() {
                format!("rapl:{RAPL_PACKAGE}")
            } else {
                log::warn!("no RAPL package domain found; profiling without power");
                "none".to_string()
            }
        } else {
            text.to_string()
        };
        text.parse().map_err(|e| CliError::new(exit::USAGE, format!("bad --power-source: {e}")))
    }

    fn executable(cmd: &str) -> Option<PathBuf> {
        if cmd.contains('/') {
            return Some(PathBuf::from(cmd));
        }
        std::env::split_paths(&std::env::var_os("PATH")?).map(|d| d.join(cmd)).find(|p| p.is_file())
    }

    fn sampler_error(e: SamplerError) -> CliError {
        let code = match &e {
            SamplerError::Attach { .. } | SamplerError::Spawn(_) => exit::ATTACH,
            SamplerError::Power(_) => exit::SENSOR,
            SamplerError::Sink { .. } => exit::SAMPLING_ABORTED,
            SamplerError::Config(_) => exit::USAGE,
            SamplerError::Debug(_) | SamplerError::Unsupported(_) => exit::INTERNAL,
        };
        CliError::new(code, e)
    }

    pub(super) fn profile(a: ProfileArgs) -> Result<u8, CliError> {
        let cfg = sampler_config(&a)?;
        confidence(a.analysis.alpha)?;
        if a.pid.is_none() && a.command.is_empty() {
            return Err(CliError::new(exit::USAGE, "give --pid or a command after --"));
        }
        let spec = power_spec(&a.power_source)?;
        let binary = match a.pid {
            Some(pid) => std::fs::read_link(format!("/proc/{pid}/exe")).ok(),
            None => executable(&a.command[0]),
        };
        let mut maps = load_maps(&a.analysis)?;
        if a.analysis.blockmaps.is_empty() && a.analysis.symbols_from.is_empty() {
            match binary {
                Some(b) => match blockmap_io::load_symbols(&b, &mut maps) {
                    Ok(_) => log::info!("no block map given; using the symbols of {}", b.display()),
                    Err(e) => log::warn!("no block map given and no usable symbols: {e}"),
                },
                None => log::warn!("no block map and no target binary; every sample will be unknown"),
            }
        }

        let base = open_source(&spec).map_err(|e| CliError::new(exit::SENSOR, e))?;
        let (mut plain, mut power_log) = match &a.record_power {
            Some(p) => (None, Some(Recorder::create(base, p).map_err(|e| CliError::new(exit::OUTPUT, e))?)),
            None => (Some(base), None),
        };
        let inner: &mut dyn PowerSource = match power_log.as_mut() {
            Some(r) => r,
            None => plain.as_mut().expect("set when not logging"),
        };
        let mut source = StaleGuard::new(inner);

        let mut recorder = match &a.record {
            Some(p) => {
                let f = std::fs::File::create(p)
                    .map_err(|e| CliError::new(exit::OUTPUT, format!("cannot write {}: {e}", p.display())))?;
                Some(QueuedWriter::spawn(std::io::BufWriter::new(f), 4096))
            }
            None => None,
        };

        if let Some(core) = a.pin_core {
            if let Err(e) = pin_current_thread(core) {
                log::warn!("cannot pin the control loop to core {core}: {e}");
            }
        }
        let clock = MonotonicClock::new();
        let mut target = match a.pid {
            Some(pid) => PtraceTarget::attach(pid, &clock),
            None => PtraceTarget::spawn(std::process::Command::new(&a.command[0]).args(&a.command[1..]), &clock),
        }
        .map_err(sampler_error)?;
        if let Some(core) = a.pin_core {
            if !target.exclude_core(core) {
                log::warn!("cannot keep the target off core {core}; it shares the control loop's core");
            }
        }

        let mut lines: Vec<TraceLine> = Vec::new();
        let header = [
            TraceLine::Meta { key: "seed".into(), value: cfg.seed.to_string() },
            TraceLine::Meta { key: "power_source".into(), value: a.power_source.clone() },
        ];
        let result = {
            let mut mem: &mut Vec<TraceLine> = &mut lines;
            let mut sink: Box<dyn TraceSink + '_> = match recorder.as_mut() {
                Some(r) => Box::new(Tee(&mut mem, r)),
                None => Box::new(&mut mem),
            };
            header.iter().try_for_each(|l| sink.write_line(l)).map_err(|e| CliError::new(exit::OUTPUT, e))?;
            run_systematic(&mut target, &cfg, &mut source, sink.as_mut(), &clock)
        };
        drop(target);
        if let Some(r) = recorder.take() {
            let finished = r.finish();
            if result.is_ok() {
                finished.map_err(|e| CliError::new(exit::OUTPUT, format!("trace: {e}")))?;
            }
        }
        let report = result.map_err(sampler_error)?;
        if source.flagged() > 0 {
            log::warn!("{} power readings repeated a timestamp and were excluded", source.flagged());
        }
        log::info!(
            "{} samples in {:.3} s, stop overhead {:.3}%",
            report.samples,
            ns_to_s(report.t_exec_ns),
            report.overhead() * 100.0
        );
        drop(source);
        if let Some(r) = power_log {
            r.finish().map_err(|e| CliError::new(exit::OUTPUT, e))?;
        }

        let trace = Trace { lines };
        if trace.records().next().is_none() {
            return Err(CliError::new(exit::MALFORMED_INPUT, format!("no samples taken; target {}", report.exit)));
        }
        emit_report(&trace, &mut maps, &a.analysis, None)?;
        if report.exit.crashed() {
            eprintln!("bbenergy: target {}; report built from the samples before it died", report.exit);
            return Ok(exit::TARGET_CRASHED);
        }
        Ok(exit::OK)
    }
}
