use alloc::collections::BTreeMap;
use alloc::vec::Vec;

use super::{GroundTruth, TruthEntry};
use crate::error::{Error, Result};
use crate::key::CombinationKey;
use crate::model::{Interval, Profile};

// Absolute slack for interval membership, so that a degenerate interval
// around an exactly-estimated value is not missed by a rounding ulp.
fn covers(ci: Interval, x: f64) -> bool {
    let eps = 1e-9 * x.abs().max(1.0);
    ci.lower - eps <= x && x <= ci.upper + eps
}

fn rel(estimate: f64, truth: f64) -> f64 {
    (estimate - truth) / truth
}

/// Estimate versus truth for one key. Relative errors are signed.
#[derive(Clone, Debug, PartialEq)]
pub struct KeyError {
    pub key: CombinationKey,
    pub truth: TruthEntry,
    pub n_k: u64,
    pub p_hat: f64,
    pub t_hat: f64,
    pub pow_hat: Option<f64>,
    pub e_hat: Option<f64>,
    pub time_rel_err: f64,
    pub power_rel_err: Option<f64>,
    pub energy_rel_err: Option<f64>,
    pub ci_valid: bool,
    pub p_covered: bool,
    /// `None` when the power interval is not computable.
    pub pow_covered: Option<bool>,
    pub e_covered: Option<bool>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ErrorReport {
    pub keys: Vec<KeyError>,
    /// Truth keys the profile never sampled.
    pub unsampled: Vec<CombinationKey>,
    pub mean_abs_time_err: f64,
    pub mean_abs_power_err: f64,
    pub mean_abs_energy_err: f64,
}

impl ErrorReport {
    pub fn get(&self, key: &CombinationKey) -> Option<&KeyError> {
        self.keys.iter().find(|k| &k.key == key)
    }

    /// Mean absolute relative energy error over keys accepted by `filter`.
    pub fn mean_abs_energy_err_where(&self, filter: impl Fn(&KeyError) -> bool) -> Option<f64> {
        mean_abs(self.keys.iter().filter(|k| filter(k)).filter_map(|k| k.energy_rel_err))
    }
}

fn mean_abs(values: impl Iterator<Item = f64>) -> Option<f64> {
    let (sum, n) = values.fold((0.0, 0usize), |(s, n), v| (s + v.abs(), n + 1));
    (n > 0).then(|| sum / n as f64)
}

/// Compares a profile with exact simulator totals. Keys containing an
/// unknown block are skipped on both sides.
pub fn evaluate(profile: &Profile, truth: &GroundTruth) -> Result<ErrorReport> {
    let mut keys = Vec::new();
    for e in profile.estimates.iter().filter(|e| !e.key.contains_unknown()) {
        let Some(t) = truth.get(&e.key) else { continue };
        let power = profile.primary_power(e);
        keys.push(KeyError {
            key: e.key.clone(),
            truth: *t,
            n_k: e.n_k,
            p_hat: e.p_hat,
            t_hat: e.t_hat,
            pow_hat: power.map(|p| p.pow_hat),
            e_hat: power.map(|p| p.e_hat),
            time_rel_err: rel(e.t_hat, t.time),
            power_rel_err: power.map(|p| rel(p.pow_hat, t.mean_power)),
            energy_rel_err: power.map(|p| rel(p.e_hat, t.energy)),
            ci_valid: e.ci_valid,
            p_covered: covers(e.p_ci, t.proportion),
            pow_covered: power.filter(|p| p.ci_computable()).map(|p| covers(p.pow_ci, t.mean_power)),
            e_covered: power.filter(|p| p.ci_computable()).map(|p| covers(p.e_ci, t.energy)),
        });
    }
    if keys.is_empty() {
        return Err(Error::DisjointKeys);
    }
    let unsampled = truth
        .entries
        .keys()
        .filter(|k| !k.contains_unknown() && profile.get(k).is_none())
        .cloned()
        .collect();
    Ok(ErrorReport {
        mean_abs_time_err: mean_abs(keys.iter().map(|k| k.time_rel_err)).unwrap_or(0.0),
        mean_abs_power_err: mean_abs(keys.iter().filter_map(|k| k.power_rel_err)).unwrap_or(0.0),
        mean_abs_energy_err: mean_abs(keys.iter().filter_map(|k| k.energy_rel_err)).unwrap_or(0.0),
        keys,
        unsampled,
    })
}

/// Hit counter for interval coverage.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Tally {
    pub covered: u64,
    pub total: u64,
}

impl Tally {
    pub fn record(&mut self, hit: bool) {
        self.total += 1;
        self.covered += hit as u64;
    }

    pub fn fraction(&self) -> Option<f64> {
        (self.total > 0).then(|| self.covered as f64 / self.total as f64)
    }
}

/// Per-key aggregate over replications.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct KeySummary {
    pub runs: u64,
    pub sum_abs_time_err: f64,
    pub sum_abs_energy_err: f64,
    pub p_coverage: Tally,
    pub pow_coverage: Tally,
    pub e_coverage: Tally,
}

impl KeySummary {
    pub fn mean_abs_time_err(&self) -> f64 {
        self.sum_abs_time_err / self.runs.max(1) as f64
    }

    pub fn mean_abs_energy_err(&self) -> f64 {
        self.sum_abs_energy_err / self.runs.max(1) as f64
    }
}

/// Aggregate of many [`ErrorReport`]s. Coverage only counts
/// (key, replication) pairs whose proportion interval passed the validity
/// rule.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ReplicationSummary {
    pub runs: u64,
    pub sum_mean_abs_time_err: f64,
    pub sum_mean_abs_energy_err: f64,
    pub p_coverage: Tally,
    pub pow_coverage: Tally,
    pub e_coverage: Tally,
    pub keys: BTreeMap<CombinationKey, KeySummary>,
}

impl ReplicationSummary {
    pub fn add(&mut self, report: &ErrorReport) {
        self.runs += 1;
        self.sum_mean_abs_time_err += report.mean_abs_time_err;
        self.sum_mean_abs_energy_err += report.mean_abs_energy_err;
        for k in &report.keys {
            let ks = self.keys.entry(k.key.clone()).or_default();
            ks.runs += 1;
            ks.sum_abs_time_err += k.time_rel_err.abs();
            ks.sum_abs_energy_err += k.energy_rel_err.map_or(0.0, f64::abs);
            if !k.ci_valid {
                continue;
            }
            for (tally, key_tally, hit) in [
                (&mut self.p_coverage, &mut ks.p_coverage, Some(k.p_covered)),
                (&mut self.pow_coverage, &mut ks.pow_coverage, k.pow_covered),
                (&mut self.e_coverage, &mut ks.e_coverage, k.e_covered),
            ] {
                if let Some(hit) = hit {
                    tally.record(hit);
                    key_tally.record(hit);
                }
            }
        }
    }

    pub fn mean_abs_time_err(&self) -> f64 {
        self.sum_mean_abs_time_err / self.runs.max(1) as f64
    }

    pub fn mean_abs_energy_err(&self) -> f64 {
        self.sum_mean_abs_energy_err / self.runs.max(1) as f64
    }
}
