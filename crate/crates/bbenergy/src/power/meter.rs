//! Direct power meters exposing a period-averaged value in a file
//! (hwmon `power*_input`, INA2xx sysfs nodes and similar).

use std::fs;
use std::path::PathBuf;
use std::str::FromStr;

use bbenergy_core::{PowerDomain, PowerSample, Reading};

use super::{PowerError, PowerSource};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MeterUnit {
    Microwatts,
    Milliwatts,
    Watts,
}

impl MeterUnit {
    pub fn to_watts(self, v: f64) -> f64 {
        match self {
            MeterUnit::Microwatts => v * 1e-6,
            MeterUnit::Milliwatts => v * 1e-3,
            MeterUnit::Watts => v,
        }
    }
}

impl FromStr for MeterUnit {
    type Err = PowerError;

    fn from_str(s: &str) -> Result<Self, PowerError> {
        match s {
            "uw" => Ok(MeterUnit::Microwatts),
            "mw" => Ok(MeterUnit::Milliwatts),
            "w" => Ok(MeterUnit::Watts),
            _ => Err(PowerError::Spec(format!("unknown unit {s:?}; use uw, mw or w"))),
        }
    }
}

pub struct MeterSource {
    domains: Vec<PowerDomain>,
    paths: Vec<PathBuf>,
    unit: MeterUnit,
}

impl MeterSource {
    pub fn open(entries: &[(PowerDomain, PathBuf)], unit: MeterUnit) -> Result<Self, PowerError> {
        let src = MeterSource {
            domains: entries.iter().map(|(d, _)| d.clone()).collect(),
            paths: entries.iter().map(|(_, p)| p.clone()).collect(),
            unit,
        };
        for (d, p) in entries {
            src.read_one(d, p)?;
        }
        Ok(src)
    }

    fn read_one(&self, domain: &PowerDomain, path: &PathBuf) -> Result<f64, PowerError> {
        let read_err = |msg: String| PowerError::Read { domain: domain.clone(), path: path.clone(), msg };
        let text = fs::read_to_string(path).map_err(|e| read_err(e.to_string()))?;
        let v: f64 = text.trim().parse().map_err(|_| read_err(format!("not a number: {:?}", text.trim())))?;
        Ok(self.unit.to_watts(v))
    }
}

impl PowerSource for MeterSource {
    fn domains(&self) -> &[PowerDomain] {
        &self.domains
    }

    fn read(&mut self, now_ns: u64) -> Result<Option<PowerSample>, PowerError> {
        let mut s = PowerSample::new(now_ns);
        for (d, p) in self.domains.iter().zip(&self.paths) {
            s.readings.push(Reading::new(d.clone(), self.read_one(d, p)?));
        }
        Ok(Some(s))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reads_and_scales() {
        let tmp = tempfile::tempdir().unwrap();
        let a = tmp.path().join("power1_input");
        fs::write(&a, "2500000\n").unwrap();
        let mut m = MeterSource::open(&[(PowerDomain::BigCluster, a.clone())], MeterUnit::Microwatts).unwrap();
        let s = m.read(7).unwrap().unwrap();
        assert_eq!(s.timestamp_ns, 7);
        assert!((s.watts(&PowerDomain::BigCluster).unwrap() - 2.5).abs() < 1e-12);
        fs::write(&a, "garbage").unwrap();
        let e = m.read(8).unwrap_err().to_string();
        assert!(e.contains("BIG_CLUSTER") && e.contains("power1_input"), "{e}");
    }

    #[test]
    fn missing_device_names_path() {
        let e = MeterSource::open(&[(PowerDomain::Gpu, "/nonexistent/power".into())], MeterUnit::Watts)
            .err()
            .unwrap()
            .to_string();
        assert!(e.contains("/nonexistent/power"), "{e}");
    }
}
