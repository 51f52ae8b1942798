//! Systematic sampling schedule.
//!
//! Sample `i` is due at `start + first_offset + i·period + jitter_i`. The
//! schedule is absolute, so the mean period does not drift with per-sample
//! processing cost. Units are whatever the caller uses: nanoseconds for live
//! sampling, ticks for the simulator.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// Live sampler settings.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SamplerConfig {
    pub period_ns: u64,
    /// Bound of the uniform per-sample offset; 0 disables jitter.
    pub jitter_ns: u64,
    /// `None` draws the first offset uniformly from `[0, period)`.
    pub first_offset_ns: Option<u64>,
    /// Core the control loop pins itself to.
    pub pin_core: Option<usize>,
    pub max_samples: Option<u64>,
    pub max_duration_ns: Option<u64>,
    pub seed: u64,
}

impl Default for SamplerConfig {
    /// 10 ms period with ±5% jitter.
    fn default() -> Self {
        SamplerConfig {
            period_ns: 10_000_000,
            jitter_ns: 500_000,
            first_offset_ns: None,
            pin_core: None,
            max_samples: None,
            max_duration_ns: None,
            seed: 0,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        validate_plan(self.period_ns, self.jitter_ns)
    }

    pub fn schedule(&self, start_ns: u64) -> Result<Schedule> {
        Schedule::new(start_ns, self.period_ns, self.jitter_ns, self.first_offset_ns, self.seed)
    }
}

fn validate_plan(period: u64, jitter: u64) -> Result<()> {
    if period == 0 {
        return Err(Error::InvalidInput("sampling period must be positive"));
    }
    if jitter.saturating_mul(2) >= period {
        return Err(Error::InvalidInput("jitter bound must be below half the period"));
    }
    Ok(())
}

/// One scheduled sampling instant.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Instant {
    pub index: u64,
    /// Grid point `start + first_offset + index·period`.
    pub nominal: u64,
    /// `nominal + jitter`, floored at `start`.
    pub target: u64,
}

/// Iterator over the sampling instants of a run.
#[derive(Clone, Debug)]
pub struct Schedule {
    start: u64,
    first_offset: u64,
    period: u64,
    jitter: u64,
    index: u64,
    rng: ChaCha8Rng,
}

impl Schedule {
    pub fn new(
        start: u64,
        period: u64,
        jitter: u64,
        first_offset: Option<u64>,
        seed: u64,
    ) -> Result<Self> {
        validate_plan(period, jitter)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let first_offset = match first_offset {
            Some(o) if o >= period => {
                return Err(Error::InvalidInput("first offset must be below the period"))
            }
            Some(o) => o,
            None => rng.random_range(0..period),
        };
        Ok(Schedule { start, first_offset, period, jitter, index: 0, rng })
    }

    pub fn first_offset(&self) -> u64 {
        self.first_offset
    }

    pub fn period(&self) -> u64 {
        self.period
    }

    pub fn jitter_bound(&self) -> u64 {
        self.jitter
    }
}

impl Iterator for Schedule {
    type Item = Instant;

    fn next(&mut self) -> Option<Instant> {
        let nominal = self
            .index
            .checked_mul(self.period)
            .and_then(|x| x.checked_add(self.start + self.first_offset))?;
        let target = if self.jitter == 0 {
            nominal
        } else {
            let j = self.rng.random_range(-(self.jitter as i64)..=self.jitter as i64);
            nominal.saturating_add_signed(j).max(self.start)
        };
        let item = Instant { index: self.index, nominal, target };
        self.index += 1;
        Some(item)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec::Vec;
    use proptest::prelude::*;

    #[test]
    fn no_jitter_zero_offset_is_exact_grid() {
        let s = Schedule::new(0, 10, 0, Some(0), 1).unwrap();
        let t: Vec<u64> = s.take(5).map(|i| i.target).collect();
        assert_eq!(t, [0, 10, 20, 30, 40]);
    }

    #[test]
    fn random_first_offset_in_period() {
        for seed in 0..200 {
            let s = Schedule::new(1000, 37, 0, None, seed).unwrap();
            assert!(s.first_offset() < 37);
        }
    }

    #[test]
    fn invalid_plans() {
        assert!(Schedule::new(0, 0, 0, None, 0).is_err());
        assert!(Schedule::new(0, 10, 5, None, 0).is_err());
        assert!(Schedule::new(0, 10, 4, None, 0).is_ok());
        assert!(Schedule::new(0, 10, 0, Some(10), 0).is_err());
        assert!(SamplerConfig::default().validate().is_ok());
    }

    #[test]
    fn deterministic_given_seed() {
        let a: Vec<_> = Schedule::new(0, 100, 20, None, 9).unwrap().take(50).collect();
        let b: Vec<_> = Schedule::new(0, 100, 20, None, 9).unwrap().take(50).collect();
        assert_eq!(a, b);
    }

    proptest! {
        #[test]
        fn jitter_bounded_and_drift_free(period in 2u64..10_000, frac in 0.0f64..0.499, seed in any::<u64>(), start in 0u64..1_000_000) {
            let jitter = ((period as f64) * frac) as u64;
            prop_assume!(2 * jitter < period);
            let s = Schedule::new(start, period, jitter, None, seed).unwrap();
            let offset = s.first_offset();
            let mut last = None;
            for inst in s.take(300) {
                prop_assert_eq!(inst.nominal, start + offset + inst.index * period);
                prop_assert!(inst.target.abs_diff(inst.nominal) <= jitter);
                prop_assert!(inst.target >= start);
                if let Some(prev) = last {
                    prop_assert!(inst.target > prev);
                }
                last = Some(inst.target);
            }
        }
    }
}
