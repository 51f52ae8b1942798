//! Synthetic workloads with exactly known per-block time and energy.
//!
//! A program is a list of blocks, each executed `k` times with a latency and
//! a power drawn per visit. The generated [`Timeline`] assigns every tick to
//! exactly one block (one block executes per tick), so exact totals are plain
//! sums over segments. Sampling the timeline with the same systematic
//! schedule as the live sampler produces sample streams whose estimates can
//! be checked against those totals.

mod evaluate;
mod sampling;
mod timeline;

pub use evaluate::{evaluate, ErrorReport, KeyError, KeySummary, ReplicationSummary, Tally};
pub use sampling::{sample_threads, sample_timeline, PowerMode, SamplingPlan};
pub use timeline::{
    generate_timeline, true_totals, true_totals_threads, GroundTruth, LatencyDist, PowerDist,
    ScheduleKind, Segment, SyntheticBlockSpec, Timeline, TruthEntry,
};

/// One tick per microsecond.
pub const DEFAULT_TICK_HZ: u64 = 1_000_000;

/// Converts ticks to nanoseconds, rounding down.
pub fn ticks_to_ns(ticks: u64, tick_hz: u64) -> u64 {
    (ticks as u128 * 1_000_000_000 / tick_hz as u128) as u64
}
