//! Simulation scenarios.
//!
//! A scenario file describes a synthetic program (blocks with latency and
//! power distributions, run on one or more threads), the sampling plan and a
//! seed. Labels become blocks of a module named `sim` whose map is
//! synthesized here, so simulated runs can be written as ordinary traces and
//! block maps and replayed like live ones.
//!
//! ```json
//! {
//!   "seed": 7,
//!   "sampling": { "period_ticks": 10000, "jitter_ticks": 4999 },
//!   "blocks": [
//!     { "label": "init", "latency": { "constant": 200 }, "power": { "constant": 8.0 }, "iterations": 500 },
//!     { "label": "loop", "latency": { "uniform": { "low": 50, "high": 150 } },
//!       "power": { "gaussian": { "mean": 12.0, "sd": 1.0 } }, "iterations": 20000 }
//!   ]
//! }
//! ```

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use bbenergy_core::blockmap::{AddressRange, BlockMap, BlockMapSet, MapGranularity};
use bbenergy_core::sim::{
    evaluate, generate_timeline, sample_threads, ticks_to_ns, true_totals_threads, ErrorReport, GroundTruth,
    LatencyDist, PowerDist, ReplicationSummary, SamplingPlan, ScheduleKind, SyntheticBlockSpec, Tally, Timeline,
    DEFAULT_TICK_HZ,
};
use bbenergy_core::{build_profile, BlockKey, ConfidenceSpec, Profile, ProfileOptions, SampleRecord};
use serde::{Deserialize, Serialize};

use crate::report::key_label;
use crate::trace::{ns_to_s, RawSample, ThreadIp, Trace, TraceLine};

pub const SIM_MODULE: &str = "sim";
const BLOCK_BASE: u64 = 0x10000;
const BLOCK_STRIDE: u64 = 0x100;
const FIRST_TID: u32 = 1000;

#[derive(Debug, thiserror::Error)]
pub enum ScenarioError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{path}: {source}")]
    Parse { path: PathBuf, source: serde_json::Error },
    #[error("invalid scenario: {0}")]
    Invalid(String),
    #[error(transparent)]
    Sim(#[from] bbenergy_core::Error),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BlockSpec {
    pub label: String,
    pub latency: LatencyDist,
    pub power: PowerDist,
    pub iterations: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ThreadSpec {
    pub blocks: Vec<BlockSpec>,
}

fn default_tick_hz() -> u64 {
    DEFAULT_TICK_HZ
}

fn default_schedule() -> ScheduleKind {
    ScheduleKind::RoundRobin
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    #[serde(default = "default_tick_hz")]
    pub tick_hz: u64,
    #[serde(default = "default_schedule")]
    pub schedule: ScheduleKind,
    #[serde(default)]
    pub seed: u64,
    pub sampling: SamplingPlan,
    /// Single-thread program. Exclusive with `threads`.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub blocks: Vec<BlockSpec>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub threads: Vec<ThreadSpec>,
}

/// One simulated run: the timelines, their exact totals and the samples.
#[derive(Clone, Debug)]
pub struct Replication {
    pub index: u64,
    pub timelines: Vec<Timeline>,
    pub truth: GroundTruth,
    pub samples: Vec<SampleRecord>,
    /// Execution time as a trace records it, in nanoseconds.
    pub t_exec_ns: u64,
}

fn splitmix(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^ (x >> 31)
}

impl Scenario {
    pub fn from_json(text: &str, path: &Path) -> Result<Self, ScenarioError> {
        let s: Scenario =
            serde_json::from_str(text).map_err(|source| ScenarioError::Parse { path: path.into(), source })?;
        s.validate()?;
        Ok(s)
    }

    pub fn load(path: &Path) -> Result<Self, ScenarioError> {
        let text = std::fs::read_to_string(path).map_err(|source| ScenarioError::Io { path: path.into(), source })?;
        Self::from_json(&text, path)
    }

    fn validate(&self) -> Result<(), ScenarioError> {
        let invalid = |m: &str| Err(ScenarioError::Invalid(m.into()));
        if self.blocks.is_empty() == self.threads.is_empty() {
            return invalid("give exactly one of `blocks` or `threads`");
        }
        if self.threads.iter().any(|t| t.blocks.is_empty()) {
            return invalid("every thread needs at least one block");
        }
        if self.tick_hz == 0 {
            return invalid("tick_hz must be positive");
        }
        if self.sampling.period_ticks == 0 {
            return invalid("period_ticks must be positive");
        }
        if self.thread_programs().flatten().any(|b| b.label.is_empty() || b.label.contains(['\t', '\n'])) {
            return invalid("block labels must be non-empty and free of tabs and newlines");
        }
        Ok(())
    }

    fn thread_programs(&self) -> impl Iterator<Item = &[BlockSpec]> {
        let single = (!self.blocks.is_empty()).then_some(self.blocks.as_slice());
        single.into_iter().chain(self.threads.iter().map(|t| t.blocks.as_slice()))
    }

    /// Distinct labels in order of first appearance.
    pub fn labels(&self) -> Vec<&str> {
        let mut out: Vec<&str> = Vec::new();
        for b in self.thread_programs().flatten() {
            if !out.contains(&b.label.as_str()) {
                out.push(&b.label);
            }
        }
        out
    }

    /// The synthetic block map: label `i` covers
    /// `[0x10000 + i·0x100, 0x10000 + (i+1)·0x100)` in module `sim`.
    pub fn block_map(&self) -> Result<BlockMapSet, ScenarioError> {
        let entries: Vec<(String, AddressRange)> = self
            .labels()
            .iter()
            .enumerate()
            .map(|(i, l)| {
                let start = BLOCK_BASE + i as u64 * BLOCK_STRIDE;
                Ok((l.to_string(), AddressRange::new(start, start + BLOCK_STRIDE)?))
            })
            .collect::<Result<_, bbenergy_core::Error>>()?;
        let mut set = BlockMapSet::new();
        set.insert_with(SIM_MODULE, |id| BlockMap::new(id, SIM_MODULE, entries, MapGranularity::Block))?;
        Ok(set)
    }

    fn programs(&self, maps: &BlockMapSet) -> Result<Vec<Vec<SyntheticBlockSpec>>, ScenarioError> {
        let map = maps.maps().next().ok_or_else(|| ScenarioError::Invalid("empty block map".into()))?;
        let key_of: BTreeMap<&str, BlockKey> = map.descriptors().iter().map(|d| (d.label.as_str(), d.key)).collect();
        Ok(self
            .thread_programs()
            .map(|blocks| {
                blocks
                    .iter()
                    .map(|b| SyntheticBlockSpec {
                        key: key_of[b.label.as_str()],
                        latency: b.latency.clone(),
                        power: b.power.clone(),
                        iterations: b.iterations,
                    })
                    .collect()
            })
            .collect())
    }

    /// Generates and samples replication `index`. Seeds of the timelines
    /// and of the sampling schedule derive from the scenario seed and the
    /// index only.
    pub fn replicate(&self, maps: &BlockMapSet, index: u64) -> Result<Replication, ScenarioError> {
        let base = splitmix(self.seed ^ splitmix(index));
        let timelines = self
            .programs(maps)?
            .iter()
            .enumerate()
            .map(|(slot, p)| generate_timeline(p, self.schedule, self.tick_hz, splitmix(base.wrapping_add(slot as u64 + 1))))
            .collect::<Result<Vec<_>, _>>()?;
        let truth = true_totals_threads(&timelines)?;
        let samples = sample_threads(&timelines, &self.sampling, base)?;
        let t_exec_ns = ticks_to_ns(truth.total_ticks, self.tick_hz);
        Ok(Replication { index, timelines, truth, samples, t_exec_ns })
    }
}

impl Replication {
    /// Profile of the samples, with execution time taken the way a trace
    /// replay takes it.
    pub fn profile(&self, confidence: ConfidenceSpec) -> Result<Profile, ScenarioError> {
        Ok(build_profile(&self.samples, &ProfileOptions::new(ns_to_s(self.t_exec_ns)).confidence(confidence))?)
    }

    /// The samples as a trace: thread slot `i` is tid `1000 + i` and a
    /// block's instruction pointer is the start of its range plus 0x10.
    pub fn to_trace(&self, maps: &BlockMapSet) -> Trace {
        let ip_of = |b: &BlockKey| -> Option<u64> {
            let BlockKey::Block { module, block } = b else { return None };
            let d = maps.map(*module)?.descriptor(*block)?;
            Some(d.ranges.first()?.start() + 0x10)
        };
        let mut lines = vec![TraceLine::Meta { key: "simulated_replication".into(), value: self.index.to_string() }];
        lines.extend(self.samples.iter().map(|s| {
            let threads = s
                .key
                .blocks()
                .iter()
                .enumerate()
                .filter_map(|(slot, b)| ip_of(b).map(|ip| ThreadIp { tid: FIRST_TID + slot as u32, ip }))
                .collect();
            TraceLine::Record(RawSample {
                seq: s.seq,
                wall_time_ns: s.wall_time_ns,
                threads,
                power: s.power.clone(),
            })
        }));
        lines.push(TraceLine::TExec(self.t_exec_ns));
        Trace { lines }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Coverage {
    pub covered: u64,
    pub total: u64,
    pub fraction: Option<f64>,
}

impl From<Tally> for Coverage {
    fn from(t: Tally) -> Self {
        Coverage { covered: t.covered, total: t.total, fraction: t.fraction() }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct KeyRow {
    pub key: String,
    pub label: String,
    pub runs: u64,
    pub mean_abs_time_err: f64,
    pub mean_abs_energy_err: f64,
    pub p_coverage: Coverage,
    pub pow_coverage: Coverage,
    pub e_coverage: Coverage,
}

/// Error and interval-coverage summary over replications.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SimulationSummary {
    pub replications: u64,
    pub alpha: f64,
    pub mean_abs_time_err: f64,
    pub mean_abs_energy_err: f64,
    /// Counts only (key, replication) pairs whose proportion interval is
    /// valid under the normal approximation.
    pub p_coverage: Coverage,
    pub pow_coverage: Coverage,
    pub e_coverage: Coverage,
    pub keys: Vec<KeyRow>,
}

/// Runs `replications` replications of `scenario` and evaluates each
/// against its exact totals. `each` sees every replication with its error
/// report.
pub fn simulate(
    scenario: &Scenario,
    replications: u64,
    confidence: ConfidenceSpec,
    mut each: impl FnMut(&Replication, &ErrorReport),
) -> Result<SimulationSummary, ScenarioError> {
    let maps = scenario.block_map()?;
    let mut summary = ReplicationSummary::default();
    for r in 0..replications {
        let rep = scenario.replicate(&maps, r)?;
        let report = evaluate(&rep.profile(confidence)?, &rep.truth)?;
        each(&rep, &report);
        summary.add(&report);
    }
    Ok(SimulationSummary {
        replications,
        alpha: confidence.alpha(),
        mean_abs_time_err: summary.mean_abs_time_err(),
        mean_abs_energy_err: summary.mean_abs_energy_err(),
        p_coverage: summary.p_coverage.into(),
        pow_coverage: summary.pow_coverage.into(),
        e_coverage: summary.e_coverage.into(),
        keys: summary
            .keys
            .iter()
            .map(|(k, s)| KeyRow {
                key: k.to_string(),
                label: key_label(&maps, k),
                runs: s.runs,
                mean_abs_time_err: s.mean_abs_time_err(),
                mean_abs_energy_err: s.mean_abs_energy_err(),
                p_coverage: s.p_coverage.into(),
                pow_coverage: s.pow_coverage.into(),
                e_coverage: s.e_coverage.into(),
            })
            .collect(),
    })
}

pub fn render_summary_text(s: &SimulationSummary) -> String {
    use std::fmt::Write as _;
    let pct = |c: &Coverage| c.fraction.map(|f| format!("{:.1}% of {}", f * 100.0, c.total)).unwrap_or_else(|| "-".into());
    let mut out = String::new();
    let _ = writeln!(out, "replications {}   confidence {:.1}%", s.replications, (1.0 - s.alpha) * 100.0);
    let _ = writeln!(out, "mean |rel err| time {:.4}%   energy {:.4}%", s.mean_abs_time_err * 100.0, s.mean_abs_energy_err * 100.0);
    let _ = writeln!(out, "coverage p {}   power {}   energy {}", pct(&s.p_coverage), pct(&s.pow_coverage), pct(&s.e_coverage));
    let width = s.keys.iter().map(|k| k.label.chars().count()).max().unwrap_or(5).max(5);
    let _ = writeln!(out, "\n{:<width$}  {:>6}  {:>10}  {:>10}  {:>16}  {:>16}", "block", "runs", "time err", "energy err", "p coverage", "power coverage");
    for k in &s.keys {
        let _ = writeln!(
            out,
            "{:<width$}  {:>6}  {:>9.4}%  {:>9.4}%  {:>16}  {:>16}",
            k.label,
            k.runs,
            k.mean_abs_time_err * 100.0,
            k.mean_abs_energy_err * 100.0,
            pct(&k.p_coverage),
            pct(&k.pow_coverage)
        );
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::trace::resolve_samples;

    const SCENARIO: &str = r#"{
        "seed": 3,
        "sampling": { "period_ticks": 1000, "jitter_ticks": 499 },
        "blocks": [
            { "label": "a", "latency": { "constant": 300 }, "power": { "constant": 5.0 }, "iterations": 400 },
            { "label": "b", "latency": { "uniform": { "low": 50, "high": 150 } },
              "power": { "gaussian": { "mean": 12.0, "sd": 1.0 } }, "iterations": 900 }
        ]
    }"#;

    fn scenario() -> Scenario {
        Scenario::from_json(SCENARIO, Path::new("test.json")).unwrap()
    }

    #[test]
    fn parses_with_defaults() {
        let s = scenario();
        assert_eq!(s.tick_hz, DEFAULT_TICK_HZ);
        assert_eq!(s.schedule, ScheduleKind::RoundRobin);
        assert_eq!(s.labels(), ["a", "b"]);
    }

    #[test]
    fn rejects_both_or_neither_program_forms() {
        let neither = r#"{ "sampling": { "period_ticks": 10 } }"#;
        assert!(matches!(Scenario::from_json(neither, Path::new("x")), Err(ScenarioError::Invalid(_))));
        let unknown = r#"{ "sampling": { "period_ticks": 10 }, "blocks": [], "bogus": 1 }"#;
        assert!(matches!(Scenario::from_json(unknown, Path::new("x")), Err(ScenarioError::Parse { .. })));
    }

    #[test]
    fn replications_are_deterministic_and_distinct() {
        let s = scenario();
        let maps = s.block_map().unwrap();
        let a = s.replicate(&maps, 0).unwrap();
        let b = s.replicate(&maps, 0).unwrap();
        let c = s.replicate(&maps, 1).unwrap();
        assert_eq!(a.samples, b.samples);
        assert_ne!(a.samples, c.samples);
    }

    #[test]
    fn emitted_trace_resolves_to_the_same_samples() {
        let s = scenario();
        let maps = s.block_map().unwrap();
        let rep = s.replicate(&maps, 0).unwrap();
        let trace = Trace::parse(&rep.to_trace(&maps).to_text()).unwrap();
        let mut fresh = s.block_map().unwrap();
        let resolved = resolve_samples(&trace, &mut fresh).unwrap();
        assert_eq!(resolved, rep.samples);
        assert_eq!(trace.t_exec_ns(), Some(rep.t_exec_ns));
    }

    #[test]
    fn summary_counts_every_replication() {
        let s = scenario();
        let mut seen = 0;
        let sum = simulate(&s, 5, ConfidenceSpec::default(), |_, _| seen += 1).unwrap();
        assert_eq!(seen, 5);
        assert_eq!(sum.replications, 5);
        assert_eq!(sum.keys.len(), 2);
        assert!(sum.mean_abs_time_err < 0.2);
        assert!(render_summary_text(&sum).contains("replications 5"));
    }
}
