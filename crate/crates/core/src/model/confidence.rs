use crate::error::{Error, Result};

// Rational approximation of the inverse normal CDF (P. J. Acklam), relative
// error 1.15e-9 before refinement.
const A: [f64; 6] = [
    -3.969683028665376e+01,
    2.209460984245205e+02,
    -2.759285104469687e+02,
    1.383577518672690e+02,
    -3.066479806614716e+01,
    2.506628277459239e+00,
];
const B: [f64; 5] = [
    -5.447609879822406e+01,
    1.615858368580409e+02,
    -1.556989798598866e+02,
    6.680131188771972e+01,
    -1.328068155288572e+01,
];
const C: [f64; 6] = [
    -7.784894002430293e-03,
    -3.223964580411365e-01,
    -2.400758277161838e+00,
    -2.549732539343734e+00,
    4.374664141464968e+00,
    2.938163982698783e+00,
];
const D: [f64; 4] = [
    7.784695709041462e-03,
    3.224671290700398e-01,
    2.445134137142996e+00,
    3.754408661907416e+00,
];
const P_LOW: f64 = 0.02425;

/// Inverse standard normal CDF for `0 < p <= 0.5`.
fn lower_tail_quantile(p: f64) -> f64 {
    let x = if p < P_LOW {
        let q = libm::sqrt(-2.0 * libm::log(p));
        (((((C[0] * q + C[1]) * q + C[2]) * q + C[3]) * q + C[4]) * q + C[5])
            / ((((D[0] * q + D[1]) * q + D[2]) * q + D[3]) * q + 1.0)
    } else {
        let q = p - 0.5;
        let r = q * q;
        (((((A[0] * r + A[1]) * r + A[2]) * r + A[3]) * r + A[4]) * r + A[5]) * q
            / (((((B[0] * r + B[1]) * r + B[2]) * r + B[3]) * r + B[4]) * r + 1.0)
    };
    // One Halley step against the exact CDF. Working in the lower tail keeps
    // the residual free of cancellation.
    let e = 0.5 * libm::erfc(-x / core::f64::consts::SQRT_2) - p;
    let u = e * libm::sqrt(2.0 * core::f64::consts::PI) * libm::exp(x * x / 2.0);
    x - u / (1.0 + x * u / 2.0)
}

/// The `1 - alpha/2` quantile of the standard normal distribution, i.e. the
/// multiplier of a two-sided `1 - alpha` confidence interval.
pub fn normal_quantile(alpha: f64) -> Result<f64> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::InvalidInput("alpha must lie in (0, 1)"));
    }
    Ok(-lower_tail_quantile(alpha / 2.0))
}

/// Significance level and its matching normal quantile.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ConfidenceSpec {
    alpha: f64,
    z: f64,
}

impl ConfidenceSpec {
    pub fn new(alpha: f64) -> Result<Self> {
        let z = normal_quantile(alpha)?;
        Ok(ConfidenceSpec { alpha, z })
    }

    /// Accepts a precomputed `z` if it agrees with `alpha` to within 1e-6.
    pub fn from_parts(alpha: f64, z: f64) -> Result<Self> {
        let expected = normal_quantile(alpha)?;
        if !(libm::fabs(expected - z) <= 1e-6) {
            return Err(Error::InvalidInput("z does not match alpha"));
        }
        Ok(ConfidenceSpec { alpha, z })
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn z(&self) -> f64 {
        self.z
    }

    pub fn level(&self) -> f64 {
        1.0 - self.alpha
    }
}

impl Default for ConfidenceSpec {
    /// 95% two-sided.
    fn default() -> Self {
        ConfidenceSpec::new(0.05).expect("0.05 is a valid alpha")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Standard normal upper-tail probability by composite Simpson
    /// integration of the density from 0 to x. Independent of libm's erfc.
    fn upper_tail_by_quadrature(x: f64) -> f64 {
        let steps = 20_000;
        let h = x / steps as f64;
        let pdf = |t: f64| libm::exp(-t * t / 2.0) / libm::sqrt(2.0 * core::f64::consts::PI);
        let mut acc = pdf(0.0) + pdf(x);
        for i in 1..steps {
            let w = if i % 2 == 1 { 4.0 } else { 2.0 };
            acc += w * pdf(i as f64 * h);
        }
        0.5 - acc * h / 3.0
    }

    /// Bisection on the quadrature CDF.
    fn quantile_oracle(alpha: f64) -> f64 {
        let (mut lo, mut hi) = (0.0, 10.0);
        for _ in 0..80 {
            let mid = 0.5 * (lo + hi);
            if upper_tail_by_quadrature(mid) > alpha / 2.0 {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        0.5 * (lo + hi)
    }

    #[test]
    fn published_table_values() {
        // Values from standard tables (qnorm(1 - a/2)).
        let cases = [
            (0.05, 1.959_963_984_540_054),
            (0.01, 2.575_829_303_548_900),
            (0.10, 1.644_853_626_951_472),
            (0.3173, 1.000_021_713_322_999),
        ];
        for (alpha, z) in cases {
            let got = normal_quantile(alpha).unwrap();
            assert!((got - z).abs() < 1e-6, "alpha={alpha}: {got} vs {z}");
        }
    }

    #[test]
    fn agrees_with_quadrature_oracle() {
        for alpha in [0.001, 0.02, 0.05, 0.2, 0.5, 0.9, 0.99] {
            let oracle = quantile_oracle(alpha);
            let got = normal_quantile(alpha).unwrap();
            assert!((got - oracle).abs() < 1e-6, "alpha={alpha}: {got} vs {oracle}");
        }
    }

    #[test]
    fn tends_to_zero_as_alpha_tends_to_one() {
        let z = normal_quantile(1.0 - 1e-9).unwrap();
        assert!(z > 0.0 && z < 1e-8);
        let mut prev = f64::INFINITY;
        for alpha in [0.01, 0.1, 0.5, 0.9, 0.999] {
            let z = normal_quantile(alpha).unwrap();
            assert!(z < prev);
            prev = z;
        }
    }

    #[test]
    fn rejects_out_of_range() {
        for alpha in [0.0, 1.0, -0.1, 1.5, f64::NAN] {
            assert!(normal_quantile(alpha).is_err());
        }
    }

    #[test]
    fn from_parts_checks_consistency() {
        assert!(ConfidenceSpec::from_parts(0.05, 1.959964).is_ok());
        assert!(ConfidenceSpec::from_parts(0.05, 1.96).is_err());
        assert_eq!(ConfidenceSpec::default().alpha(), 0.05);
    }
}
