//! Power readings and the energy-counter delta rule.
//!
//! Energy-counter sensors (the powercap layout) expose a monotonically
//! increasing microjoule counter that wraps at `max_energy_range_uj`. Power
//! for one sample is the energy consumed since the previous read divided by
//! the time between the two reads.

use alloc::string::{String, ToString};
use alloc::vec::Vec;
use core::fmt;
use core::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A measured power domain.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum PowerDomain {
    Pkg,
    Pp0,
    Pp1,
    Dram,
    BigCluster,
    LittleCluster,
    Gpu,
    Custom(String),
}

impl PowerDomain {
    pub fn as_str(&self) -> &str {
        match self {
            PowerDomain::Pkg => "PKG",
            PowerDomain::Pp0 => "PP0",
            PowerDomain::Pp1 => "PP1",
            PowerDomain::Dram => "DRAM",
            PowerDomain::BigCluster => "BIG_CLUSTER",
            PowerDomain::LittleCluster => "LITTLE_CLUSTER",
            PowerDomain::Gpu => "GPU",
            PowerDomain::Custom(name) => name,
        }
    }
}

impl fmt::Display for PowerDomain {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for PowerDomain {
    type Err = Error;

    /// Any non-empty name without separator characters is accepted; names
    /// outside the fixed set become `Custom`.
    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "PKG" => PowerDomain::Pkg,
            "PP0" => PowerDomain::Pp0,
            "PP1" => PowerDomain::Pp1,
            "DRAM" => PowerDomain::Dram,
            "BIG_CLUSTER" => PowerDomain::BigCluster,
            "LITTLE_CLUSTER" => PowerDomain::LittleCluster,
            "GPU" => PowerDomain::Gpu,
            "" => return Err(Error::InvalidInput("empty power domain name")),
            other => {
                if other.chars().any(|c| matches!(c, ',' | ';' | '=' | '!' | ':' | '+') || c.is_whitespace()) {
                    return Err(Error::InvalidInput("power domain name contains a separator"));
                }
                PowerDomain::Custom(other.to_string())
            }
        })
    }
}

/// One domain's watts at a sample. Suspect readings are kept in traces but
/// excluded from estimation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Reading {
    pub domain: PowerDomain,
    pub watts: f64,
    pub suspect: bool,
}

impl Reading {
    /// Negative or non-finite watts are marked suspect.
    pub fn new(domain: PowerDomain, watts: f64) -> Self {
        let suspect = !(watts.is_finite() && watts >= 0.0);
        Reading { domain, watts, suspect }
    }
}

/// Per-domain power at one instant. A sample may carry no readings, e.g. the
/// first read of a counter source, which only seeds the counter state.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PowerSample {
    pub timestamp_ns: u64,
    pub readings: Vec<Reading>,
}

impl PowerSample {
    pub fn new(timestamp_ns: u64) -> Self {
        PowerSample { timestamp_ns, readings: Vec::new() }
    }

    pub fn with_reading(mut self, domain: PowerDomain, watts: f64) -> Self {
        self.readings.push(Reading::new(domain, watts));
        self
    }

    /// Watts for `domain`, ignoring suspect readings.
    pub fn watts(&self, domain: &PowerDomain) -> Option<f64> {
        self.readings
            .iter()
            .find(|r| &r.domain == domain && !r.suspect)
            .map(|r| r.watts)
    }

    pub fn suspect_count(&self) -> usize {
        self.readings.iter().filter(|r| r.suspect).count()
    }
}

/// Last observed raw value of a wrapping microjoule counter.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EnergyCounterState {
    last_raw_uj: u64,
    wrap_range_uj: u64,
    last_time_ns: u64,
}

impl EnergyCounterState {
    pub fn new(raw_uj: u64, wrap_range_uj: u64, time_ns: u64) -> Result<Self> {
        if wrap_range_uj == 0 {
            return Err(Error::InvalidInput("counter wrap range must be positive"));
        }
        if raw_uj >= wrap_range_uj {
            return Err(Error::InvalidInput("counter value not below wrap range"));
        }
        Ok(EnergyCounterState { last_raw_uj: raw_uj, wrap_range_uj, last_time_ns: time_ns })
    }

    pub fn last_raw_uj(&self) -> u64 {
        self.last_raw_uj
    }

    pub fn wrap_range_uj(&self) -> u64 {
        self.wrap_range_uj
    }

    pub fn last_time_ns(&self) -> u64 {
        self.last_time_ns
    }
}

/// Result of one counter read.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CounterReading {
    pub watts: f64,
    /// Wrap-corrected energy since the previous read.
    pub delta_uj: u64,
    /// Power exceeded the plausibility cap.
    pub suspect: bool,
    pub state: EnergyCounterState,
}

/// Wrap-corrected counter delta, always in `[0, wrap_range)`.
pub fn counter_delta(last_raw_uj: u64, raw_now_uj: u64, wrap_range_uj: u64) -> u64 {
    if raw_now_uj >= last_raw_uj {
        raw_now_uj - last_raw_uj
    } else {
        wrap_range_uj - last_raw_uj + raw_now_uj
    }
}

/// Converts a new counter value into average watts over the interval since
/// `prev`. Readings above `cap_watts` are returned flagged, not rejected.
pub fn power_from_energy_delta(
    prev: &EnergyCounterState,
    raw_now_uj: u64,
    t_now_ns: u64,
    cap_watts: Option<f64>,
) -> Result<CounterReading> {
    if t_now_ns <= prev.last_time_ns {
        return Err(Error::ZeroInterval);
    }
    if raw_now_uj >= prev.wrap_range_uj {
        return Err(Error::InvalidInput("counter value not below wrap range"));
    }
    let delta_uj = counter_delta(prev.last_raw_uj, raw_now_uj, prev.wrap_range_uj);
    let dt_s = (t_now_ns - prev.last_time_ns) as f64 * 1e-9;
    let watts = delta_uj as f64 * 1e-6 / dt_s;
    let suspect = cap_watts.is_some_and(|cap| watts > cap);
    Ok(CounterReading {
        watts,
        delta_uj,
        suspect,
        state: EnergyCounterState {
            last_raw_uj: raw_now_uj,
            wrap_range_uj: prev.wrap_range_uj,
            last_time_ns: t_now_ns,
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn plain_delta() {
        let prev = EnergyCounterState::new(100, 1 << 32, 0).unwrap();
        let r = power_from_energy_delta(&prev, 600, 10_000_000, None).unwrap();
        assert_eq!(r.delta_uj, 500);
        assert!((r.watts - 0.05).abs() < 1e-15);
        assert_eq!(r.state.last_raw_uj(), 600);
        assert_eq!(r.state.last_time_ns(), 10_000_000);
    }

    #[test]
    fn wraparound() {
        let wrap = 262_143_328_850;
        let prev = EnergyCounterState::new(wrap - 100, wrap, 5).unwrap();
        let r = power_from_energy_delta(&prev, 400, 10_000_005, None).unwrap();
        assert_eq!(r.delta_uj, 500);
        assert!((r.watts - 0.05).abs() < 1e-15);
    }

    #[test]
    fn zero_interval_is_an_error() {
        let prev = EnergyCounterState::new(0, 1000, 42).unwrap();
        assert_eq!(power_from_energy_delta(&prev, 10, 42, None), Err(Error::ZeroInterval));
    }

    #[test]
    fn cap_flags_suspect() {
        let prev = EnergyCounterState::new(0, u64::MAX, 0).unwrap();
        // 1 J in 1 ms = 1000 W
        let r = power_from_energy_delta(&prev, 1_000_000, 1_000_000, Some(500.0)).unwrap();
        assert!(r.suspect);
        let r = power_from_energy_delta(&prev, 1_000_000, 1_000_000, Some(2000.0)).unwrap();
        assert!(!r.suspect);
    }

    #[test]
    fn state_rejects_raw_at_wrap() {
        assert!(EnergyCounterState::new(10, 10, 0).is_err());
        assert!(EnergyCounterState::new(0, 0, 0).is_err());
    }

    #[test]
    fn domain_names() {
        for name in ["PKG", "PP0", "PP1", "DRAM", "BIG_CLUSTER", "LITTLE_CLUSTER", "GPU", "PSYS"] {
            let d: PowerDomain = name.parse().unwrap();
            assert_eq!(d.as_str(), name);
        }
        assert!("a=b".parse::<PowerDomain>().is_err());
        assert!("".parse::<PowerDomain>().is_err());
    }

    #[test]
    fn negative_reading_is_suspect() {
        let s = PowerSample::new(0)
            .with_reading(PowerDomain::Pkg, -1.0)
            .with_reading(PowerDomain::Dram, 2.0);
        assert_eq!(s.watts(&PowerDomain::Pkg), None);
        assert_eq!(s.watts(&PowerDomain::Dram), Some(2.0));
        assert_eq!(s.suspect_count(), 1);
    }

    proptest! {
        #[test]
        fn delta_within_wrap_range(wrap in 1u64..u64::MAX, a in any::<u64>(), b in any::<u64>()) {
            let (a, b) = (a % wrap, b % wrap);
            let d = counter_delta(a, b, wrap);
            prop_assert!(d < wrap);
            prop_assert_eq!((a as u128 + d as u128) % wrap as u128, b as u128);
        }
    }
}
