use alloc::collections::BTreeMap;
use alloc::format;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use super::{
    energy_ci, estimate_energy, estimate_mean_power, estimate_proportion, estimate_time, power_ci,
    proportion_ci, ConfidenceSpec, Interval,
};
use crate::error::{Error, Result};
use crate::key::{BlockKey, CombinationKey};
use crate::power::{PowerDomain, PowerSample};

/// One synchronized observation of the profiled program.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleRecord {
    pub seq: u64,
    /// Nanoseconds since the start of the profiled run.
    pub wall_time_ns: u64,
    pub key: CombinationKey,
    pub power: PowerSample,
}

/// How samples are keyed when aggregating.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Granularity {
    /// Each live thread slot of a sample is one observation of its block,
    /// carrying the full power reading (shared-resource attribution).
    Block,
    /// The full per-thread tuple is the key.
    Combination,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ProfileOptions {
    /// Measured wall time of the profiled run, in seconds.
    pub t_exec: f64,
    pub confidence: ConfidenceSpec,
    pub granularity: Granularity,
    /// Domain reported as the headline power/energy. Defaults to the first
    /// domain seen in the stream.
    pub primary_domain: Option<PowerDomain>,
}

impl ProfileOptions {
    pub fn new(t_exec: f64) -> Self {
        ProfileOptions {
            t_exec,
            confidence: ConfidenceSpec::default(),
            granularity: Granularity::Combination,
            primary_domain: None,
        }
    }

    pub fn granularity(mut self, granularity: Granularity) -> Self {
        self.granularity = granularity;
        self
    }

    pub fn confidence(mut self, confidence: ConfidenceSpec) -> Self {
        self.confidence = confidence;
        self
    }
}

/// Power and energy estimates of one key in one domain.
#[derive(Clone, Debug, PartialEq)]
pub struct PowerEstimate {
    pub domain: PowerDomain,
    pub n_readings: u64,
    pub pow_hat: f64,
    /// `None` when fewer than two readings exist; the intervals are then
    /// degenerate points.
    pub pow_s: Option<f64>,
    pub pow_ci: Interval,
    pub e_hat: f64,
    pub e_ci: Interval,
}

impl PowerEstimate {
    pub fn ci_computable(&self) -> bool {
        self.pow_s.is_some()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BlockEstimate {
    pub key: CombinationKey,
    pub n_k: u64,
    pub p_hat: f64,
    pub p_ci: Interval,
    /// Normal-approximation rule for the proportion interval.
    pub ci_valid: bool,
    pub t_hat: f64,
    pub t_ci: Interval,
    /// One entry per domain with at least one usable reading, in domain order.
    pub power: Vec<PowerEstimate>,
}

impl BlockEstimate {
    pub fn power_for(&self, domain: &PowerDomain) -> Option<&PowerEstimate> {
        self.power.iter().find(|p| &p.domain == domain)
    }
}

/// Whole-run totals for one power domain.
#[derive(Clone, Debug, PartialEq)]
pub struct DomainTotal {
    pub domain: PowerDomain,
    pub n_readings: u64,
    /// Sum of per-key energy estimates.
    pub estimated_energy: f64,
    /// Sum of `watts × interval` over the stream, with each reading covering
    /// the interval since the previous sample. For counter sources this is
    /// the counter delta itself.
    pub measured_energy: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Profile {
    pub t_exec: f64,
    /// Observations aggregated: samples in combination mode, live thread
    /// slots in block mode.
    pub n: u64,
    pub n_samples: u64,
    pub thread_slots: usize,
    pub granularity: Granularity,
    pub confidence: ConfidenceSpec,
    pub primary_domain: Option<PowerDomain>,
    /// Sorted by key.
    pub estimates: Vec<BlockEstimate>,
    pub domain_totals: Vec<DomainTotal>,
    pub suspect_readings: u64,
}

impl Profile {
    pub fn get(&self, key: &CombinationKey) -> Option<&BlockEstimate> {
        self.estimates
            .binary_search_by(|e| e.key.cmp(key))
            .ok()
            .map(|i| &self.estimates[i])
    }

    /// Headline power estimate of `estimate`.
    pub fn primary_power<'a>(&self, estimate: &'a BlockEstimate) -> Option<&'a PowerEstimate> {
        self.primary_domain.as_ref().and_then(|d| estimate.power_for(d))
    }
}

#[derive(Default)]
struct KeyAcc {
    n_k: u64,
    power: BTreeMap<PowerDomain, Vec<f64>>,
}

impl KeyAcc {
    fn observe(&mut self, power: &PowerSample) {
        self.n_k += 1;
        for r in power.readings.iter().filter(|r| !r.suspect) {
            self.power.entry(r.domain.clone()).or_default().push(r.watts);
        }
    }
}

fn validate(samples: &[SampleRecord], opts: &ProfileOptions) -> Result<usize> {
    let first = samples.first().ok_or(Error::EmptyStream)?;
    if !(opts.t_exec.is_finite() && opts.t_exec >= 0.0) {
        return Err(Error::InvalidInput("t_exec must be finite and non-negative"));
    }
    let slots = first.key.len();
    if slots == 0 {
        return Err(Error::MalformedStream { seq: first.seq, reason: "empty key".into() });
    }
    for pair in samples.windows(2) {
        let (a, b) = (&pair[0], &pair[1]);
        if b.seq <= a.seq {
            return Err(Error::MalformedStream { seq: b.seq, reason: "seq not increasing".into() });
        }
        if b.wall_time_ns < a.wall_time_ns {
            return Err(Error::MalformedStream { seq: b.seq, reason: "wall time decreased".into() });
        }
    }
    if let Some(bad) = samples.iter().find(|s| s.key.len() != slots) {
        return Err(Error::MalformedStream {
            seq: bad.seq,
            reason: format!("key has {} thread slots, expected {}", bad.key.len(), slots),
        });
    }
    Ok(slots)
}

/// Aggregates a sample stream into per-key estimates.
///
/// The result is a pure function of its inputs: keys are kept in a sorted
/// map and readings are summed in stream order.
pub fn build_profile(samples: &[SampleRecord], opts: &ProfileOptions) -> Result<Profile> {
    let thread_slots = validate(samples, opts)?;
    let spec = opts.confidence;

    let mut keys: BTreeMap<CombinationKey, KeyAcc> = BTreeMap::new();
    let mut n = 0u64;
    let mut suspect_readings = 0u64;
    let mut first_domain: Option<PowerDomain> = None;
    // (readings, measured energy)
    let mut totals: BTreeMap<PowerDomain, (u64, f64)> = BTreeMap::new();
    let mut prev_wall = 0u64;

    for s in samples {
        match opts.granularity {
            Granularity::Combination => {
                keys.entry(s.key.clone()).or_default().observe(&s.power);
                n += 1;
            }
            Granularity::Block => {
                for b in s.key.blocks().iter().filter(|b| !b.is_absent()) {
                    keys.entry(CombinationKey::single(*b)).or_default().observe(&s.power);
                    n += 1;
                }
            }
        }
        suspect_readings += s.power.suspect_count() as u64;
        let dt = (s.wall_time_ns - prev_wall) as f64 * 1e-9;
        for r in s.power.readings.iter().filter(|r| !r.suspect) {
            if first_domain.is_none() {
                first_domain = Some(r.domain.clone());
            }
            let t = totals.entry(r.domain.clone()).or_insert((0, 0.0));
            t.0 += 1;
            t.1 += r.watts * dt;
        }
        prev_wall = s.wall_time_ns;
    }
    if n == 0 {
        return Err(Error::EmptyStream);
    }

    let mut estimates = Vec::with_capacity(keys.len());
    for (key, acc) in keys {
        let p_hat = estimate_proportion(acc.n_k, n)?;
        let p = proportion_ci(p_hat, n, &spec);
        let t_hat = estimate_time(p_hat, opts.t_exec);
        let mut power = Vec::with_capacity(acc.power.len());
        for (domain, watts) in acc.power {
            let pow_hat = estimate_mean_power(&watts)?;
            let ci = power_ci(&watts, &spec)?;
            power.push(PowerEstimate {
                domain,
                n_readings: watts.len() as u64,
                pow_hat,
                pow_s: ci.s,
                pow_ci: ci.interval,
                e_hat: estimate_energy(pow_hat, t_hat),
                e_ci: energy_ci(p.interval, opts.t_exec, ci.interval),
            });
        }
        estimates.push(BlockEstimate {
            key,
            n_k: acc.n_k,
            p_hat,
            p_ci: p.interval,
            ci_valid: p.valid,
            t_hat,
            t_ci: p.interval.scale(opts.t_exec),
            power,
        });
    }

    let domain_totals = totals
        .into_iter()
        .map(|(domain, (n_readings, measured_energy))| {
            let estimated_energy = estimates
                .iter()
                .filter_map(|e| e.power_for(&domain))
                .map(|p| p.e_hat)
                .sum();
            DomainTotal { domain, n_readings, estimated_energy, measured_energy }
        })
        .collect();

    Ok(Profile {
        t_exec: opts.t_exec,
        n,
        n_samples: samples.len() as u64,
        thread_slots,
        granularity: opts.granularity,
        confidence: spec,
        primary_domain: opts.primary_domain.clone().or(first_domain),
        estimates,
        domain_totals,
        suspect_readings,
    })
}

/// Blocks of `universe` that appear in no estimate key.
pub fn unsampled_blocks<'a>(
    profile: &Profile,
    universe: impl IntoIterator<Item = &'a BlockKey>,
) -> Vec<BlockKey> {
    let mut seen: alloc::collections::BTreeSet<BlockKey> = alloc::collections::BTreeSet::new();
    for e in &profile.estimates {
        seen.extend(e.key.blocks().iter().copied());
    }
    universe.into_iter().filter(|b| !seen.contains(b)).copied().collect()
}
