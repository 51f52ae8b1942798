use alloc::collections::BTreeMap;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::key::{BlockKey, CombinationKey};

/// Per-visit latency in ticks.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LatencyDist {
    Constant(u64),
    /// Inclusive bounds.
    Uniform { low: u64, high: u64 },
    TwoPoint { short: u64, long: u64, p_short: f64 },
}

impl LatencyDist {
    fn validate(&self) -> Result<()> {
        let ok = match *self {
            LatencyDist::Constant(t) => t >= 1,
            LatencyDist::Uniform { low, high } => low >= 1 && low <= high,
            LatencyDist::TwoPoint { short, long, p_short } => {
                short >= 1 && long >= 1 && (0.0..=1.0).contains(&p_short)
            }
        };
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidInput("latencies must be at least one tick"))
        }
    }

    fn draw(&self, rng: &mut ChaCha8Rng) -> u64 {
        match *self {
            LatencyDist::Constant(t) => t,
            LatencyDist::Uniform { low, high } => rng.random_range(low..=high),
            LatencyDist::TwoPoint { short, long, p_short } => {
                if rng.random_bool(p_short) {
                    short
                } else {
                    long
                }
            }
        }
    }

    pub fn mean(&self) -> f64 {
        match *self {
            LatencyDist::Constant(t) => t as f64,
            LatencyDist::Uniform { low, high } => (low + high) as f64 / 2.0,
            LatencyDist::TwoPoint { short, long, p_short } => {
                p_short * short as f64 + (1.0 - p_short) * long as f64
            }
        }
    }
}

/// Per-visit power in watts.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PowerDist {
    Constant(f64),
    /// Normal, truncated at zero by redrawing.
    Gaussian { mean: f64, sd: f64 },
    TwoLevel { low: f64, high: f64, p_high: f64 },
}

impl PowerDist {
    fn validate(&self) -> Result<()> {
        let ok = match *self {
            PowerDist::Constant(w) => w >= 0.0 && w.is_finite(),
            PowerDist::Gaussian { mean, sd } => mean.is_finite() && sd >= 0.0 && sd.is_finite(),
            PowerDist::TwoLevel { low, high, p_high } => {
                low >= 0.0 && high >= 0.0 && low.is_finite() && high.is_finite()
                    && (0.0..=1.0).contains(&p_high)
            }
        };
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidInput("power distribution out of range"))
        }
    }

    fn draw(&self, rng: &mut ChaCha8Rng) -> f64 {
        match *self {
            PowerDist::Constant(w) => w,
            PowerDist::Gaussian { mean, sd } => {
                let normal = Normal::new(mean, sd).expect("validated");
                for _ in 0..64 {
                    let w = normal.sample(rng);
                    if w >= 0.0 {
                        return w;
                    }
                }
                0.0
            }
            PowerDist::TwoLevel { low, high, p_high } => {
                if rng.random_bool(p_high) {
                    high
                } else {
                    low
                }
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticBlockSpec {
    pub key: BlockKey,
    pub latency: LatencyDist,
    pub power: PowerDist,
    pub iterations: u64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScheduleKind {
    /// One visit of each block in turn until every block has run `k` times.
    RoundRobin,
    /// All visits of the first block, then all of the second, and so on.
    Sequential,
}

/// One visit: `key` runs over ticks `[start, end)` drawing `power` watts.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Segment {
    pub key: BlockKey,
    pub start: u64,
    pub end: u64,
    pub power: f64,
}

impl Segment {
    pub fn ticks(&self) -> u64 {
        self.end - self.start
    }
}

/// Contiguous segments covering `[0, total_ticks)`.
#[derive(Clone, Debug, PartialEq)]
pub struct Timeline {
    segments: Vec<Segment>,
    tick_hz: u64,
    // watt-ticks consumed before each segment, plus the total at the end
    cum_energy: Vec<f64>,
}

impl Timeline {
    pub fn from_segments(segments: Vec<Segment>, tick_hz: u64) -> Result<Self> {
        if tick_hz == 0 {
            return Err(Error::InvalidInput("tick rate must be positive"));
        }
        if segments.is_empty() {
            return Err(Error::InvalidInput("empty timeline"));
        }
        let mut at = 0;
        for s in &segments {
            if s.start != at || s.end <= s.start {
                return Err(Error::InvalidInput("segments must be contiguous from tick 0"));
            }
            if !(s.power >= 0.0 && s.power.is_finite()) {
                return Err(Error::InvalidInput("segment power out of range"));
            }
            at = s.end;
        }
        let mut cum_energy = Vec::with_capacity(segments.len() + 1);
        let mut acc = 0.0;
        cum_energy.push(acc);
        for s in &segments {
            acc += s.power * s.ticks() as f64;
            cum_energy.push(acc);
        }
        Ok(Timeline { segments, tick_hz, cum_energy })
    }

    pub fn segments(&self) -> &[Segment] {
        &self.segments
    }

    pub fn tick_hz(&self) -> u64 {
        self.tick_hz
    }

    pub fn total_ticks(&self) -> u64 {
        self.segments.last().map_or(0, |s| s.end)
    }

    pub fn t_exec(&self) -> f64 {
        self.total_ticks() as f64 / self.tick_hz as f64
    }

    /// Segment covering `tick`, if any.
    pub fn at(&self, tick: u64) -> Option<&Segment> {
        if tick >= self.total_ticks() {
            return None;
        }
        let i = self.segments.partition_point(|s| s.start <= tick) - 1;
        Some(&self.segments[i])
    }

    /// Watt-ticks consumed over `[0, tick)`.
    pub fn energy_before(&self, tick: u64) -> f64 {
        let tick = tick.min(self.total_ticks());
        let i = self.segments.partition_point(|s| s.end <= tick);
        match self.segments.get(i) {
            Some(s) => self.cum_energy[i] + s.power * (tick - s.start) as f64,
            None => self.cum_energy[i],
        }
    }
}

/// Builds a timeline for `program`. Deterministic given `seed`; every block
/// appears exactly `iterations` times.
pub fn generate_timeline(
    program: &[SyntheticBlockSpec],
    schedule: ScheduleKind,
    tick_hz: u64,
    seed: u64,
) -> Result<Timeline> {
    if program.is_empty() {
        return Err(Error::InvalidInput("empty program"));
    }
    for b in program {
        b.latency.validate()?;
        b.power.validate()?;
        if b.iterations == 0 {
            return Err(Error::InvalidInput("every block needs at least one iteration"));
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let visits: u64 = program.iter().map(|b| b.iterations).sum();
    let mut segments = Vec::with_capacity(visits as usize);
    let mut at = 0u64;
    let mut visit = |b: &SyntheticBlockSpec, rng: &mut ChaCha8Rng| {
        let len = b.latency.draw(rng);
        let power = b.power.draw(rng);
        segments.push(Segment { key: b.key, start: at, end: at + len, power });
        at += len;
    };
    match schedule {
        ScheduleKind::Sequential => {
            for b in program {
                for _ in 0..b.iterations {
                    visit(b, &mut rng);
                }
            }
        }
        ScheduleKind::RoundRobin => {
            let rounds = program.iter().map(|b| b.iterations).max().unwrap_or(0);
            for round in 0..rounds {
                for b in program.iter().filter(|b| round < b.iterations) {
                    visit(b, &mut rng);
                }
            }
        }
    }
    Timeline::from_segments(segments, tick_hz)
}

/// Exact totals of one key.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TruthEntry {
    pub ticks: u64,
    /// Seconds.
    pub time: f64,
    /// `ticks / total_ticks`.
    pub proportion: f64,
    /// Joules.
    pub energy: f64,
    /// Time-weighted mean watts, `energy / time`.
    pub mean_power: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GroundTruth {
    pub tick_hz: u64,
    pub total_ticks: u64,
    pub t_exec: f64,
    pub e_total: f64,
    pub entries: BTreeMap<CombinationKey, TruthEntry>,
}

impl GroundTruth {
    pub fn get(&self, key: &CombinationKey) -> Option<&TruthEntry> {
        self.entries.get(key)
    }

    fn from_sums(tick_hz: u64, total_ticks: u64, sums: BTreeMap<CombinationKey, (u64, f64)>) -> Self {
        let hz = tick_hz as f64;
        let mut e_total = 0.0;
        let entries = sums
            .into_iter()
            .map(|(key, (ticks, watt_ticks))| {
                let time = ticks as f64 / hz;
                let energy = watt_ticks / hz;
                e_total += energy;
                let entry = TruthEntry {
                    ticks,
                    time,
                    proportion: ticks as f64 / total_ticks as f64,
                    energy,
                    mean_power: watt_ticks / ticks as f64,
                };
                (key, entry)
            })
            .collect();
        GroundTruth { tick_hz, total_ticks, t_exec: total_ticks as f64 / hz, e_total, entries }
    }
}

/// Exact per-block sums over every segment of a single-thread timeline.
pub fn true_totals(timeline: &Timeline) -> GroundTruth {
    let mut sums: BTreeMap<CombinationKey, (u64, f64)> = BTreeMap::new();
    for s in timeline.segments() {
        let e = sums.entry(CombinationKey::single(s.key)).or_insert((0, 0.0));
        e.0 += s.ticks();
        e.1 += s.power * s.ticks() as f64;
    }
    GroundTruth::from_sums(timeline.tick_hz(), timeline.total_ticks(), sums)
}

/// Exact per-combination sums over parallel timelines, one per thread slot.
/// Package power at a tick is the sum over live slots; slots past their end
/// are `Absent`.
pub fn true_totals_threads(timelines: &[Timeline]) -> Result<GroundTruth> {
    let first = timelines.first().ok_or(Error::InvalidInput("no thread timelines"))?;
    let tick_hz = first.tick_hz();
    if timelines.iter().any(|t| t.tick_hz() != tick_hz) {
        return Err(Error::InvalidInput("thread timelines disagree on tick rate"));
    }
    let total = timelines.iter().map(Timeline::total_ticks).max().unwrap_or(0);
    let mut cursor = alloc::vec![0usize; timelines.len()];
    let mut sums: BTreeMap<CombinationKey, (u64, f64)> = BTreeMap::new();
    let mut at = 0u64;
    while at < total {
        let mut next = total;
        let mut power = 0.0;
        let mut key = Vec::with_capacity(timelines.len());
        for (slot, t) in timelines.iter().enumerate() {
            match t.segments().get(cursor[slot]) {
                Some(s) => {
                    key.push(s.key);
                    power += s.power;
                    next = next.min(s.end);
                }
                None => key.push(BlockKey::Absent),
            }
        }
        let len = next - at;
        let e = sums.entry(CombinationKey::new(key)).or_insert((0, 0.0));
        e.0 += len;
        e.1 += power * len as f64;
        for (slot, t) in timelines.iter().enumerate() {
            if t.segments().get(cursor[slot]).is_some_and(|s| s.end == next) {
                cursor[slot] += 1;
            }
        }
        at = next;
    }
    Ok(GroundTruth::from_sums(tick_hz, total, sums))
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    const A: BlockKey = BlockKey::Block { module: crate::ModuleId(0), block: crate::BlockId(0) };
    const B: BlockKey = BlockKey::Block { module: crate::ModuleId(0), block: crate::BlockId(1) };

    fn spec(key: BlockKey, latency: LatencyDist, power: f64, k: u64) -> SyntheticBlockSpec {
        SyntheticBlockSpec { key, latency, power: PowerDist::Constant(power), iterations: k }
    }

    #[test]
    fn one_block_three_visits() {
        let t = generate_timeline(&[spec(A, LatencyDist::Constant(100), 1.0, 3)], ScheduleKind::RoundRobin, 1000, 0).unwrap();
        assert_eq!(t.segments().len(), 3);
        assert_eq!(t.total_ticks(), 300);
        assert_eq!((t.segments()[2].start, t.segments()[2].end), (200, 300));
    }

    #[test]
    fn sequential_equal_totals_split_half() {
        let prog = [spec(A, LatencyDist::Constant(50), 1.0, 4), spec(B, LatencyDist::Constant(100), 1.0, 2)];
        let t = generate_timeline(&prog, ScheduleKind::Sequential, 1000, 0).unwrap();
        assert!(t.segments()[..4].iter().all(|s| s.key == A));
        let truth = true_totals(&t);
        assert_eq!(truth.get(&A.into()).unwrap().proportion, 0.5);
        assert_eq!(truth.get(&B.into()).unwrap().proportion, 0.5);
    }

    #[test]
    fn round_robin_interleaves_and_counts_visits() {
        let prog = [spec(A, LatencyDist::Constant(1), 1.0, 3), spec(B, LatencyDist::Constant(1), 1.0, 1)];
        let t = generate_timeline(&prog, ScheduleKind::RoundRobin, 1000, 0).unwrap();
        let keys: Vec<_> = t.segments().iter().map(|s| s.key).collect();
        assert_eq!(keys, [A, B, A, A]);
    }

    #[test]
    fn deterministic_given_seed() {
        let prog = [SyntheticBlockSpec {
            key: A,
            latency: LatencyDist::Uniform { low: 50, high: 150 },
            power: PowerDist::Gaussian { mean: 10.0, sd: 2.0 },
            iterations: 100,
        }];
        let a = generate_timeline(&prog, ScheduleKind::RoundRobin, 1000, 7).unwrap();
        let b = generate_timeline(&prog, ScheduleKind::RoundRobin, 1000, 7).unwrap();
        let c = generate_timeline(&prog, ScheduleKind::RoundRobin, 1000, 8).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
        assert!(a.segments().iter().all(|s| (50..=150).contains(&s.ticks()) && s.power >= 0.0));
    }

    #[test]
    fn rejects_bad_programs() {
        assert!(generate_timeline(&[], ScheduleKind::RoundRobin, 1000, 0).is_err());
        assert!(generate_timeline(&[spec(A, LatencyDist::Constant(0), 1.0, 1)], ScheduleKind::RoundRobin, 1000, 0).is_err());
        assert!(generate_timeline(&[spec(A, LatencyDist::Constant(1), 1.0, 0)], ScheduleKind::RoundRobin, 1000, 0).is_err());
        assert!(generate_timeline(&[spec(A, LatencyDist::Constant(1), -1.0, 1)], ScheduleKind::RoundRobin, 1000, 0).is_err());
    }

    #[test]
    fn totals_forced_sums() {
        let segs = vec![
            Segment { key: A, start: 0, end: 600, power: 10.0 },
            Segment { key: B, start: 600, end: 1000, power: 10.0 },
            Segment { key: A, start: 1000, end: 2000, power: 10.0 },
        ];
        let t = Timeline::from_segments(segs, 1000).unwrap();
        let truth = true_totals(&t);
        assert_eq!(truth.t_exec, 2.0);
        assert!((truth.e_total - 20.0).abs() < 1e-12);
        let a = truth.get(&A.into()).unwrap();
        assert_eq!((a.ticks, a.time, a.proportion), (1600, 1.6, 0.8));
    }

    #[test]
    fn totals_match_per_tick_brute_force() {
        let prog = [
            SyntheticBlockSpec { key: A, latency: LatencyDist::Uniform { low: 1, high: 20 }, power: PowerDist::Gaussian { mean: 8.0, sd: 3.0 }, iterations: 200 },
            SyntheticBlockSpec { key: B, latency: LatencyDist::TwoPoint { short: 3, long: 40, p_short: 0.7 }, power: PowerDist::TwoLevel { low: 5.0, high: 15.0, p_high: 0.3 }, iterations: 150 },
        ];
        let t = generate_timeline(&prog, ScheduleKind::RoundRobin, 1000, 3).unwrap();
        let truth = true_totals(&t);
        let mut ticks: BTreeMap<BlockKey, (u64, f64)> = BTreeMap::new();
        for tick in 0..t.total_ticks() {
            let s = t.at(tick).unwrap();
            let e = ticks.entry(s.key).or_default();
            e.0 += 1;
            e.1 += s.power / 1000.0;
        }
        for (k, (n, e)) in ticks {
            let entry = truth.get(&k.into()).unwrap();
            assert_eq!(entry.ticks, n);
            assert!((entry.energy - e).abs() < 1e-9 * e.max(1.0));
        }
    }

    #[test]
    fn energy_before_matches_brute_force() {
        let segs = vec![
            Segment { key: A, start: 0, end: 3, power: 2.0 },
            Segment { key: B, start: 3, end: 10, power: 5.0 },
        ];
        let t = Timeline::from_segments(segs, 10).unwrap();
        let mut acc = 0.0;
        for tick in 0..=12 {
            assert_eq!(t.energy_before(tick), acc);
            if let Some(s) = t.at(tick) {
                acc += s.power;
            }
        }
    }

    #[test]
    fn thread_totals_sweep() {
        let t1 = Timeline::from_segments(vec![
            Segment { key: A, start: 0, end: 4, power: 1.0 },
            Segment { key: B, start: 4, end: 10, power: 2.0 },
        ], 10).unwrap();
        let t2 = Timeline::from_segments(vec![Segment { key: A, start: 0, end: 6, power: 3.0 }], 10).unwrap();
        let truth = true_totals_threads(&[t1, t2]).unwrap();
        let key = |a, b| CombinationKey::new(vec![a, b]);
        assert_eq!(truth.total_ticks, 10);
        assert_eq!(truth.get(&key(A, A)).unwrap().ticks, 4);
        assert_eq!(truth.get(&key(B, A)).unwrap().ticks, 2);
        assert_eq!(truth.get(&key(B, BlockKey::Absent)).unwrap().ticks, 4);
        assert!((truth.get(&key(B, A)).unwrap().mean_power - 5.0).abs() < 1e-12);
        let ticks: u64 = truth.entries.values().map(|e| e.ticks).sum();
        assert_eq!(ticks, 10);
    }
}
