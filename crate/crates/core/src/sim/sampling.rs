use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use super::{ticks_to_ns, Timeline};
use crate::error::{Error, Result};
use crate::key::{BlockKey, CombinationKey};
use crate::model::SampleRecord;
use crate::power::{PowerDomain, PowerSample};
use crate::schedule::Schedule;

/// How a simulated sensor reports power at a sample.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PowerMode {
    /// Power of the segment(s) executing at the sampled tick.
    #[default]
    Instantaneous,
    /// Average power since the previous sample, as an energy counter reports.
    TrailingAverage,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SamplingPlan {
    pub period_ticks: u64,
    /// Bound of the uniform per-sample offset; 0 disables jitter.
    #[serde(default)]
    pub jitter_ticks: u64,
    /// `None` draws the first offset uniformly from `[0, period)`.
    #[serde(default)]
    pub first_offset: Option<u64>,
    #[serde(default)]
    pub power_mode: PowerMode,
    #[serde(default = "default_domain")]
    pub domain: PowerDomain,
}

fn default_domain() -> PowerDomain {
    PowerDomain::Pkg
}

impl SamplingPlan {
    pub fn new(period_ticks: u64) -> Self {
        SamplingPlan {
            period_ticks,
            jitter_ticks: 0,
            first_offset: None,
            power_mode: PowerMode::Instantaneous,
            domain: PowerDomain::Pkg,
        }
    }

    pub fn jitter(mut self, jitter_ticks: u64) -> Self {
        self.jitter_ticks = jitter_ticks;
        self
    }

    pub fn first_offset(mut self, offset: u64) -> Self {
        self.first_offset = Some(offset);
        self
    }

    pub fn power_mode(mut self, mode: PowerMode) -> Self {
        self.power_mode = mode;
        self
    }

    /// Census plan: every tick, no jitter.
    pub fn census() -> Self {
        SamplingPlan::new(1).first_offset(0)
    }
}

/// Samples a single-thread timeline.
pub fn sample_timeline(timeline: &Timeline, plan: &SamplingPlan, seed: u64) -> Result<Vec<SampleRecord>> {
    sample_threads(core::slice::from_ref(timeline), plan, seed)
}

/// Samples parallel timelines (one per thread slot) at the same ticks.
///
/// Instants whose jittered tick falls past the end of the run are dropped;
/// sequence numbers keep the schedule index, so they stay increasing.
pub fn sample_threads(timelines: &[Timeline], plan: &SamplingPlan, seed: u64) -> Result<Vec<SampleRecord>> {
    let first = timelines.first().ok_or(Error::InvalidInput("no thread timelines"))?;
    let tick_hz = first.tick_hz();
    if timelines.iter().any(|t| t.tick_hz() != tick_hz) {
        return Err(Error::InvalidInput("thread timelines disagree on tick rate"));
    }
    let total = timelines.iter().map(Timeline::total_ticks).max().unwrap_or(0);
    let schedule = Schedule::new(0, plan.period_ticks, plan.jitter_ticks, plan.first_offset, seed)?;
    let energy_before = |tick: u64| timelines.iter().map(|t| t.energy_before(tick)).sum::<f64>();

    let mut out = Vec::with_capacity((total / plan.period_ticks + 1) as usize);
    let mut window_start = 0u64;
    for inst in schedule.take_while(|i| i.nominal < total) {
        let tick = inst.target;
        if tick >= total {
            continue;
        }
        let mut key = Vec::with_capacity(timelines.len());
        let mut instantaneous = 0.0;
        for t in timelines {
            match t.at(tick) {
                Some(s) => {
                    key.push(s.key);
                    instantaneous += s.power;
                }
                None => key.push(BlockKey::Absent),
            }
        }
        let watts = match plan.power_mode {
            PowerMode::Instantaneous => instantaneous,
            PowerMode::TrailingAverage => {
                let end = tick + 1;
                let w = (energy_before(end) - energy_before(window_start)) / (end - window_start) as f64;
                window_start = end;
                w
            }
        };
        let wall_time_ns = ticks_to_ns(tick, tick_hz);
        out.push(SampleRecord {
            seq: inst.index,
            wall_time_ns,
            key: CombinationKey::new(key),
            power: PowerSample::new(wall_time_ns).with_reading(plan.domain.clone(), watts),
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{build_profile, ProfileOptions};
    use crate::sim::{true_totals, Segment};
    use alloc::vec;

    const A: BlockKey = BlockKey::Block { module: crate::ModuleId(0), block: crate::BlockId(0) };
    const B: BlockKey = BlockKey::Block { module: crate::ModuleId(0), block: crate::BlockId(1) };

    fn alternating(half: u64, cycles: u64) -> Timeline {
        let segs = (0..2 * cycles)
            .map(|i| Segment {
                key: if i % 2 == 0 { A } else { B },
                start: i * half,
                end: (i + 1) * half,
                power: if i % 2 == 0 { 9.0 } else { 12.0 },
            })
            .collect();
        Timeline::from_segments(segs, 1_000_000).unwrap()
    }

    #[test]
    fn census_reproduces_truth_exactly() {
        let t = Timeline::from_segments(vec![
            Segment { key: A, start: 0, end: 7, power: 1.0 },
            Segment { key: B, start: 7, end: 10, power: 3.0 },
            Segment { key: A, start: 10, end: 13, power: 2.0 },
        ], 1000).unwrap();
        let samples = sample_timeline(&t, &SamplingPlan::census(), 0).unwrap();
        assert_eq!(samples.len(), 13);
        let truth = true_totals(&t);
        let p = build_profile(&samples, &ProfileOptions::new(truth.t_exec)).unwrap();
        for e in &p.estimates {
            assert_eq!(e.p_hat, truth.get(&e.key).unwrap().proportion);
        }
    }

    #[test]
    fn aliasing_without_jitter_hits_one_block() {
        let t = alternating(500, 200);
        let samples = sample_timeline(&t, &SamplingPlan::new(1000), 11).unwrap();
        let first = samples[0].key.clone();
        assert!(samples.iter().all(|s| s.key == first));
        assert_eq!(samples.len(), 200);
    }

    #[test]
    fn default_five_percent_jitter_does_not_break_exact_aliasing() {
        // phase placed mid-block: ±5% of the period never crosses a boundary
        let t = alternating(500, 200);
        let samples = sample_timeline(&t, &SamplingPlan::new(1000).jitter(50).first_offset(250), 11).unwrap();
        assert!(samples.iter().all(|s| s.key.blocks()[0] == A));
    }

    #[test]
    fn trailing_average_conserves_energy() {
        let t = alternating(37, 500);
        let samples = sample_timeline(&t, &SamplingPlan::new(100).power_mode(PowerMode::TrailingAverage), 5).unwrap();
        let mut prev = 0u64;
        let mut energy = 0.0;
        for s in &samples {
            let tick = s.wall_time_ns / 1000 + 1;
            energy += s.power.readings[0].watts * (tick - prev) as f64;
            prev = tick;
        }
        assert!((energy - t.energy_before(prev)).abs() < 1e-6);
    }

    #[test]
    fn threads_get_absent_after_their_end() {
        let long = alternating(10, 10);
        let short = Timeline::from_segments(vec![Segment { key: A, start: 0, end: 50, power: 1.0 }], 1_000_000).unwrap();
        let samples = sample_threads(&[long, short], &SamplingPlan::new(10).first_offset(5), 0).unwrap();
        assert_eq!(samples.len(), 20);
        assert_eq!(samples[4].key.blocks()[1], A);
        assert_eq!(samples[5].key.blocks()[1], BlockKey::Absent);
        // package power sums both slots
        assert_eq!(samples[0].power.readings[0].watts, 10.0);
    }

    #[test]
    fn sample_times_follow_the_grid() {
        let t = alternating(10, 100);
        let samples = sample_timeline(&t, &SamplingPlan::new(25).first_offset(0), 0).unwrap();
        for (i, s) in samples.iter().enumerate() {
            assert_eq!(s.seq, i as u64);
            assert_eq!(s.wall_time_ns, i as u64 * 25 * 1000);
        }
    }
}
