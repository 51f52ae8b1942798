use serde::{Deserialize, Serialize};

use super::ConfidenceSpec;
use crate::error::{Error, Result};

/// Closed interval `[lower, upper]`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Interval {
    pub lower: f64,
    pub upper: f64,
}

impl Interval {
    pub fn new(lower: f64, upper: f64) -> Self {
        Interval { lower, upper }
    }

    pub fn point(x: f64) -> Self {
        Interval { lower: x, upper: x }
    }

    pub fn contains(&self, x: f64) -> bool {
        self.lower <= x && x <= self.upper
    }

    pub fn half_width(&self) -> f64 {
        (self.upper - self.lower) / 2.0
    }

    pub fn scale(&self, factor: f64) -> Self {
        Interval { lower: self.lower * factor, upper: self.upper * factor }
    }
}

/// Fraction of samples that hit a key: `n_k / n`.
pub fn estimate_proportion(n_k: u64, n: u64) -> Result<f64> {
    if n == 0 {
        return Err(Error::EmptyStream);
    }
    if n_k > n {
        return Err(Error::InvalidInput("key count exceeds total sample count"));
    }
    Ok(n_k as f64 / n as f64)
}

pub fn estimate_time(p_hat: f64, t_exec: f64) -> f64 {
    debug_assert!((0.0..=1.0).contains(&p_hat));
    debug_assert!(t_exec >= 0.0);
    p_hat * t_exec
}

/// Arithmetic mean of the power readings attached to a key's samples.
pub fn estimate_mean_power(samples: &[f64]) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::InvalidInput("no power samples"));
    }
    Ok(samples.iter().sum::<f64>() / samples.len() as f64)
}

pub fn estimate_energy(pow_hat: f64, t_hat: f64) -> f64 {
    pow_hat * t_hat
}

/// Wald interval on a proportion.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ProportionCi {
    /// Clamped to `[0, 1]`.
    pub interval: Interval,
    /// Whether the normal approximation holds: `n·p > 5` and `n·(1-p) > 5`.
    pub valid: bool,
}

pub fn proportion_ci(p_hat: f64, n: u64, spec: &ConfidenceSpec) -> ProportionCi {
    debug_assert!(n >= 1);
    let n_f = n as f64;
    let half = spec.z() * libm::sqrt(p_hat * (1.0 - p_hat) / n_f);
    let interval = Interval::new((p_hat - half).max(0.0), (p_hat + half).min(1.0));
    let valid = n_f * p_hat > 5.0 && n_f * (1.0 - p_hat) > 5.0;
    ProportionCi { interval, valid }
}

/// Normal interval on mean power. The lower bound is clamped at zero when
/// every reading is non-negative.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PowerCi {
    pub interval: Interval,
    /// Corrected sample standard deviation; `None` with a single sample, in
    /// which case `interval` is the degenerate point interval.
    pub s: Option<f64>,
}

impl PowerCi {
    pub fn computable(&self) -> bool {
        self.s.is_some()
    }
}

pub fn power_ci(samples: &[f64], spec: &ConfidenceSpec) -> Result<PowerCi> {
    let mean = estimate_mean_power(samples)?;
    if samples.len() < 2 {
        return Ok(PowerCi { interval: Interval::point(mean), s: None });
    }
    let n = samples.len() as f64;
    let ss: f64 = samples.iter().map(|x| (x - mean) * (x - mean)).sum();
    let s = libm::sqrt(ss / (n - 1.0));
    let half = spec.z() * s / libm::sqrt(n);
    let mut lower = mean - half;
    // Power is non-negative, so a negative lower bound carries no information.
    if samples.iter().all(|&x| x >= 0.0) {
        lower = lower.max(0.0);
    }
    Ok(PowerCi { interval: Interval::new(lower, mean + half), s: Some(s) })
}

/// Energy bounds from the product of the proportion and power bounds. The
/// joint coverage of this product is not exactly `1 - alpha`.
pub fn energy_ci(p_ci: Interval, t_exec: f64, pow_ci: Interval) -> Interval {
    Interval::new(p_ci.lower * t_exec * pow_ci.lower, p_ci.upper * t_exec * pow_ci.upper)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn spec() -> ConfidenceSpec {
        ConfidenceSpec::new(0.05).unwrap()
    }

    #[test]
    fn proportion() {
        assert_eq!(estimate_proportion(50, 1000).unwrap(), 0.05);
        assert_eq!(estimate_proportion(0, 10).unwrap(), 0.0);
        assert_eq!(estimate_proportion(10, 10).unwrap(), 1.0);
        assert_eq!(estimate_proportion(1, 0), Err(Error::EmptyStream));
        assert!(estimate_proportion(11, 10).is_err());
    }

    #[test]
    fn time_and_energy() {
        assert!((estimate_time(0.05, 20.0) - 1.0).abs() < 1e-15);
        assert_eq!(estimate_time(1.0, 7.3), 7.3);
        assert_eq!(estimate_energy(11.0, 1.0), 11.0);
        assert_eq!(estimate_energy(0.0, 5.0), 0.0);
    }

    #[test]
    fn mean_power() {
        assert_eq!(estimate_mean_power(&[10.0, 12.0, 11.0]).unwrap(), 11.0);
        assert_eq!(estimate_mean_power(&[8.80]).unwrap(), 8.80);
        assert!(estimate_mean_power(&[]).is_err());
    }

    #[test]
    fn proportion_interval_at_half() {
        // z(0.05) = 1.959964 from the quantile oracle, half-width = z * 0.05.
        let ci = proportion_ci(0.5, 100, &spec());
        assert!((ci.interval.lower - 0.402).abs() < 5e-4);
        assert!((ci.interval.upper - 0.598).abs() < 5e-4);
        assert!((ci.interval.half_width() - 1.959_963_984_540_054 * 0.05).abs() < 1e-9);
        assert!(ci.valid);
    }

    #[test]
    fn proportion_interval_degenerate() {
        let ci = proportion_ci(1.0, 50, &spec());
        assert_eq!(ci.interval, Interval::point(1.0));
        assert!(!ci.valid);
        assert!(!proportion_ci(0.04, 100, &spec()).valid);
    }

    #[test]
    fn power_interval() {
        let ci = power_ci(&[10.0, 12.0, 11.0], &spec()).unwrap();
        assert_eq!(ci.s, Some(1.0));
        let half = 1.959_963_984_540_054 / 3f64.sqrt();
        assert!((ci.interval.lower - (11.0 - half)).abs() < 1e-9);
        assert!((ci.interval.upper - (11.0 + half)).abs() < 1e-9);

        let ci = power_ci(&[5.0; 4], &spec()).unwrap();
        assert_eq!(ci.s, Some(0.0));
        assert_eq!(ci.interval, Interval::point(5.0));
    }

    #[test]
    fn power_interval_single_sample() {
        let ci = power_ci(&[7.5], &spec()).unwrap();
        assert!(!ci.computable());
        assert_eq!(ci.interval, Interval::point(7.5));
        assert!(power_ci(&[], &spec()).is_err());
    }

    #[test]
    fn energy_interval() {
        let e = energy_ci(Interval::new(0.4, 0.6), 10.0, Interval::new(9.0, 11.0));
        assert!((e.lower - 36.0).abs() < 1e-12);
        assert!((e.upper - 66.0).abs() < 1e-12);
        let e = energy_ci(Interval::point(1.0), 2.0, Interval::point(5.0));
        assert_eq!(e, Interval::point(10.0));
    }

    proptest! {
        #[test]
        fn doubling_n_shrinks_half_width_by_sqrt2(p in 0.01f64..0.99, n in 200u64..1_000_000) {
            let s = spec();
            let a = proportion_ci(p, n, &s).interval;
            let b = proportion_ci(p, 2 * n, &s).interval;
            // Unclamped in this range: p ± half stays inside [0, 1].
            prop_assume!(a.lower > 0.0 && a.upper < 1.0);
            let ratio = a.half_width() / b.half_width();
            prop_assert!((ratio - core::f64::consts::SQRT_2).abs() < 1e-9);
        }

        #[test]
        fn proportion_bounds_clamped(p in 0.0f64..=1.0, n in 1u64..10_000) {
            let ci = proportion_ci(p, n, &spec());
            prop_assert!(0.0 <= ci.interval.lower && ci.interval.upper <= 1.0);
            prop_assert!(ci.interval.lower <= p && p <= ci.interval.upper);
        }

        #[test]
        fn power_half_width_scales_with_inverse_sqrt_n(base in proptest::collection::vec(0.0f64..50.0, 2..20), reps in 2usize..6) {
            // Repeating a sample set keeps the mean and shrinks the upper
            // half-width roughly by sqrt(reps).
            let s = spec();
            let ci = power_ci(&base, &s).unwrap();
            let sd = ci.s.unwrap();
            let expected = s.z() * sd / (base.len() as f64).sqrt();
            let mean = estimate_mean_power(&base).unwrap();
            prop_assert!((ci.interval.upper - mean - expected).abs() <= 1e-9 * (1.0 + expected));
            let repeated: alloc::vec::Vec<f64> = base.iter().copied().cycle().take(base.len() * reps).collect();
            let ci2 = power_ci(&repeated, &s).unwrap();
            prop_assert!(ci2.interval.upper <= ci.interval.upper + 1e-9);
        }

        #[test]
        fn nonnegative_power_gives_nonnegative_energy_bounds(
            powers in proptest::collection::vec(0.0f64..100.0, 2..30),
            p in 0.0f64..=1.0, n in 1u64..1000, t in 0.0f64..100.0,
        ) {
            let s = spec();
            let p_ci = proportion_ci(p, n, &s).interval;
            let pow = power_ci(&powers, &s).unwrap().interval;
            prop_assert!(pow.lower >= 0.0);
            let e = energy_ci(p_ci, t, pow);
            prop_assert!(e.lower >= 0.0 && e.lower <= e.upper);
        }
    }
}
