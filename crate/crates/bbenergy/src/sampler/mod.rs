//! The control loop.
//!
//! [`run_systematic`] sleeps until each scheduled instant, stops the target,
//! reads every thread's instruction pointer, resumes it and reads the power
//! source. Instants come from an absolute schedule anchored at the target's
//! start, so per-sample cost does not accumulate as drift.

mod scripted;
mod writer;

#[cfg(target_os = "linux")]
pub mod affinity;
#[cfg(target_os = "linux")]
mod ptrace;

use std::fmt;
use std::io;
use std::str::FromStr;
use std::sync::atomic::{AtomicU64, Ordering};

use bbenergy_core::blockmap::ModuleRegion;
use bbenergy_core::schedule::SamplerConfig;
use bbenergy_core::PowerSample;
use thiserror::Error;

use crate::power::{PowerError, PowerSource};
use crate::trace::{RawSample, ThreadIp, TraceLine, TraceSink};

pub use scripted::ScriptedTarget;
pub use writer::{QueuedWriter, Tee};

#[cfg(target_os = "linux")]
pub use ptrace::PtraceTarget;

pub trait Clock {
    fn now_ns(&self) -> u64;
}

/// Nanoseconds since construction, from the monotonic clock.
#[derive(Clone, Copy, Debug)]
pub struct MonotonicClock {
    origin: std::time::Instant,
}

impl MonotonicClock {
    pub fn new() -> Self {
        MonotonicClock { origin: std::time::Instant::now() }
    }
}

impl Default for MonotonicClock {
    fn default() -> Self {
        Self::new()
    }
}

impl Clock for MonotonicClock {
    fn now_ns(&self) -> u64 {
        self.origin.elapsed().as_nanos() as u64
    }
}

/// A clock that only moves when told to.
#[derive(Debug, Default)]
pub struct VirtualClock {
    now: AtomicU64,
}

impl VirtualClock {
    pub fn new(start_ns: u64) -> Self {
        VirtualClock { now: AtomicU64::new(start_ns) }
    }

    /// Moves to `t` unless the clock is already past it.
    pub fn advance_to(&self, t: u64) {
        self.now.fetch_max(t, Ordering::SeqCst);
    }

    pub fn advance_by(&self, d: u64) {
        self.now.fetch_add(d, Ordering::SeqCst);
    }
}

impl Clock for VirtualClock {
    fn now_ns(&self) -> u64 {
        self.now.load(Ordering::SeqCst)
    }
}

/// How the profiled run ended.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TargetExit {
    Exited(i32),
    Signaled(i32),
    /// The sampler stopped early and left the target running.
    Detached,
    /// The process is gone but its status could not be collected.
    Unknown,
}

impl TargetExit {
    pub fn crashed(&self) -> bool {
        matches!(self, TargetExit::Signaled(_))
    }
}

impl fmt::Display for TargetExit {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TargetExit::Exited(c) => write!(f, "exited:{c}"),
            TargetExit::Signaled(s) => write!(f, "signaled:{s}"),
            TargetExit::Detached => f.write_str("detached"),
            TargetExit::Unknown => f.write_str("unknown"),
        }
    }
}

impl FromStr for TargetExit {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        let bad = || format!("bad exit status {s:?}");
        match s.split_once(':') {
            Some(("exited", c)) => c.parse().map(TargetExit::Exited).map_err(|_| bad()),
            Some(("signaled", c)) => c.parse().map(TargetExit::Signaled).map_err(|_| bad()),
            None if s == "detached" => Ok(TargetExit::Detached),
            None if s == "unknown" => Ok(TargetExit::Unknown),
            _ => Err(bad()),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Wait {
    Due,
    Exited { at_ns: u64, exit: TargetExit },
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Stop {
    /// `since_ns`: clock reading when the first thread was told to stop.
    Stopped { threads: Vec<ThreadIp>, since_ns: u64 },
    Exited { at_ns: u64, exit: TargetExit },
}

/// A process under the sampler's control.
///
/// Between calls the target runs; `stop` leaves every live thread stopped
/// until `resume`.
pub trait Target {
    /// Clock reading at which the run started.
    fn start_ns(&self) -> u64;

    /// Blocks until `deadline_ns` or target exit, whichever is first.
    fn wait_until(&mut self, clock: &dyn Clock, deadline_ns: u64) -> Result<Wait, SamplerError>;

    fn stop(&mut self, clock: &dyn Clock) -> Result<Stop, SamplerError>;

    fn resume(&mut self) -> Result<(), SamplerError>;

    /// Releases a running target.
    fn detach(&mut self) -> Result<(), SamplerError>;

    /// Regions of modules loaded since the last call that contain one of
    /// `threads`' pointers.
    fn new_modules(&mut self, _threads: &[ThreadIp], _now_ns: u64) -> Vec<ModuleRegion> {
        Vec::new()
    }
}

#[derive(Debug, Error)]
pub enum SamplerError {
    #[error("cannot attach to {pid}: {msg}")]
    Attach { pid: i32, msg: String },
    #[error("cannot start target: {0}")]
    Spawn(#[source] io::Error),
    #[error("debug interface: {0}")]
    Debug(String),
    #[error(transparent)]
    Power(#[from] PowerError),
    #[error("trace sink failed after {} samples: {source}", report.samples)]
    Sink {
        #[source]
        source: io::Error,
        report: Box<SamplerReport>,
    },
    #[error(transparent)]
    Config(#[from] bbenergy_core::Error),
    #[error("unsupported on this platform: {0}")]
    Unsupported(&'static str),
}

/// Min, mean and max of a series.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct Spread {
    pub count: u64,
    pub min: u64,
    pub max: u64,
    pub sum: u128,
}

impl Spread {
    pub fn add(&mut self, v: u64) {
        if self.count == 0 {
            self.min = v;
            self.max = v;
        } else {
            self.min = self.min.min(v);
            self.max = self.max.max(v);
        }
        self.count += 1;
        self.sum += v as u128;
    }

    pub fn mean(&self) -> Option<f64> {
        (self.count > 0).then(|| self.sum as f64 / self.count as f64)
    }
}

impl fmt::Display for Spread {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.mean() {
            Some(m) => write!(f, "{}/{:.0}/{}", self.min, m, self.max),
            None => f.write_str("-"),
        }
    }
}

/// What a sampling run measured about itself.
#[derive(Clone, Debug, PartialEq)]
pub struct SamplerReport {
    pub samples: u64,
    pub t_exec_ns: u64,
    pub exit: TargetExit,
    pub period_ns: u64,
    pub jitter_ns: u64,
    pub first_offset_ns: u64,
    /// Total time the target spent stopped by the sampler.
    pub stop_ns_total: u64,
    pub stop_ns: Spread,
    /// Realized spacing between consecutive samples.
    pub interval_ns: Spread,
    /// How late each sample started relative to its jittered target.
    pub lateness_ns: Spread,
    /// Largest intentional jitter drawn.
    pub max_jitter_ns: u64,
    /// Instants skipped because the loop fell more than a period behind.
    pub missed: u64,
    pub partial: bool,
}

impl SamplerReport {
    fn new(config: &SamplerConfig, first_offset_ns: u64) -> Self {
        SamplerReport {
            samples: 0,
            t_exec_ns: 0,
            exit: TargetExit::Unknown,
            period_ns: config.period_ns,
            jitter_ns: config.jitter_ns,
            first_offset_ns,
            stop_ns_total: 0,
            stop_ns: Spread::default(),
            interval_ns: Spread::default(),
            lateness_ns: Spread::default(),
            max_jitter_ns: 0,
            missed: 0,
            partial: false,
        }
    }

    /// Stop time as a fraction of the run.
    pub fn overhead(&self) -> f64 {
        if self.t_exec_ns == 0 {
            0.0
        } else {
            self.stop_ns_total as f64 / self.t_exec_ns as f64
        }
    }

    /// Trailer lines recorded at the end of a trace.
    pub fn trailer(&self) -> Vec<TraceLine> {
        let meta = |k: &str, v: String| TraceLine::Meta { key: k.to_string(), value: v };
        let mut out = vec![
            meta("samples", self.samples.to_string()),
            meta("period_ns", self.period_ns.to_string()),
            meta("jitter_ns", self.jitter_ns.to_string()),
            meta("first_offset_ns", self.first_offset_ns.to_string()),
            meta("stop_ns_total", self.stop_ns_total.to_string()),
            meta("stop_ns", self.stop_ns.to_string()),
            meta("interval_ns", self.interval_ns.to_string()),
            meta("lateness_ns", self.lateness_ns.to_string()),
            meta("max_jitter_ns", self.max_jitter_ns.to_string()),
            meta("missed", self.missed.to_string()),
            meta("exit", self.exit.to_string()),
        ];
        if self.partial {
            out.push(meta("partial", "true".into()));
        }
        out.push(TraceLine::TExec(self.t_exec_ns));
        out
    }
}

/// One sample, or the target's exit.
#[derive(Clone, Debug, PartialEq)]
pub enum SampleOutcome {
    Sample { raw: RawSample, stop_ns: u64, taken_at_ns: u64 },
    Exited { at_ns: u64, exit: TargetExit },
}

/// Stops the target, reads its pointers, resumes it and reads power.
///
/// The power source is read after the pointers. Its end of stream yields a
/// sample without readings.
pub fn sample_once(
    target: &mut dyn Target,
    source: &mut dyn PowerSource,
    clock: &dyn Clock,
    seq: u64,
) -> Result<SampleOutcome, SamplerError> {
    let t0 = clock.now_ns();
    let (threads, since_ns) = match target.stop(clock)? {
        Stop::Stopped { threads, since_ns } => (threads, since_ns),
        Stop::Exited { at_ns, exit } => return Ok(SampleOutcome::Exited { at_ns, exit }),
    };
    // read before resuming: once continued the target may run before we do
    let t1 = clock.now_ns();
    target.resume()?;
    let wall = t0.saturating_sub(target.start_ns());
    let mut power = source.read(t1)?.unwrap_or_else(|| PowerSample::new(wall));
    power.timestamp_ns = wall;
    Ok(SampleOutcome::Sample {
        raw: RawSample { seq, wall_time_ns: wall, threads, power },
        stop_ns: t1.saturating_sub(since_ns),
        taken_at_ns: t0,
    })
}

/// Samples `target` until it exits or a stop condition hits.
///
/// Lines go to `sink` as they are produced: module regions as discovered,
/// one record per sample, and a trailer with the run's statistics and
/// `t_exec_ns`. On a sink failure the run stops, the target is released and
/// the error carries the partial report. On any other error the target is
/// released too.
pub fn run_systematic(
    target: &mut dyn Target,
    config: &SamplerConfig,
    source: &mut dyn PowerSource,
    sink: &mut dyn TraceSink,
    clock: &dyn Clock,
) -> Result<SamplerReport, SamplerError> {
    let result = run_inner(target, config, source, sink, clock);
    match &result {
        Ok(r) if r.exit == TargetExit::Detached => target.detach()?,
        Ok(_) => {}
        Err(_) => {
            let _ = target.detach();
        }
    }
    result
}

fn run_inner(
    target: &mut dyn Target,
    config: &SamplerConfig,
    source: &mut dyn PowerSource,
    sink: &mut dyn TraceSink,
    clock: &dyn Clock,
) -> Result<SamplerReport, SamplerError> {
    let start = target.start_ns();
    let schedule = config.schedule(start)?;
    let mut report = SamplerReport::new(config, schedule.first_offset());
    let mut instants = schedule.peekable();
    let mut last_taken: Option<u64> = None;

    macro_rules! emit {
        ($line:expr) => {
            if let Err(source) = sink.write_line(&$line) {
                report.partial = true;
                report.t_exec_ns = clock.now_ns().saturating_sub(start);
                let _ = sink.write_line(&TraceLine::Meta { key: "partial".into(), value: "true".into() });
                return Err(SamplerError::Sink { source, report: Box::new(report) });
            }
        };
    }

    loop {
        let inst = instants.next().expect("schedule is unbounded");
        let truncated = config.max_samples.is_some_and(|m| report.samples >= m)
            || config.max_duration_ns.is_some_and(|d| inst.nominal - start > d);
        if truncated {
            // the samples taken cover the run up to this instant
            report.exit = TargetExit::Detached;
            report.t_exec_ns = (inst.nominal - start).min(config.max_duration_ns.unwrap_or(u64::MAX));
            break;
        }
        if let Wait::Exited { at_ns, exit } = target.wait_until(clock, inst.target)? {
            report.exit = exit;
            report.t_exec_ns = at_ns.saturating_sub(start);
            break;
        }
        let now = clock.now_ns();
        if instants.peek().is_some_and(|next| now >= next.target) {
            report.missed += 1;
            continue;
        }
        match sample_once(target, source, clock, inst.index)? {
            SampleOutcome::Exited { at_ns, exit } => {
                report.exit = exit;
                report.t_exec_ns = at_ns.saturating_sub(start);
                break;
            }
            SampleOutcome::Sample { raw, stop_ns, taken_at_ns } => {
                report.samples += 1;
                report.stop_ns_total += stop_ns;
                report.stop_ns.add(stop_ns);
                report.lateness_ns.add(taken_at_ns.saturating_sub(inst.target));
                report.max_jitter_ns = report.max_jitter_ns.max(inst.target.abs_diff(inst.nominal));
                if let Some(prev) = last_taken {
                    report.interval_ns.add(taken_at_ns - prev);
                }
                last_taken = Some(taken_at_ns);
                for m in target.new_modules(&raw.threads, clock.now_ns()) {
                    emit!(TraceLine::Module(m));
                }
                emit!(TraceLine::Record(raw));
            }
        }
    }
    for line in report.trailer() {
        emit!(line);
    }
    Ok(report)
}
