//! Energy-counter sources: live powercap directories and recorded counter
//! files. Both emit power only from the second read on.

use std::fs;
use std::path::{Path, PathBuf};

use bbenergy_core::power::{power_from_energy_delta, EnergyCounterState};
use bbenergy_core::{PowerDomain, PowerSample, Reading};

use super::{PowerError, PowerSource};

/// Counter state of one domain.
#[derive(Clone, Debug)]
struct Counter {
    domain: PowerDomain,
    wrap_uj: u64,
    cap_watts: Option<f64>,
    state: Option<EnergyCounterState>,
}

impl Counter {
    fn update(&mut self, raw_uj: u64, t_ns: u64) -> Result<Option<Reading>, PowerError> {
        let err = |source| PowerError::Counter { domain: self.domain.clone(), source };
        match self.state {
            None => {
                self.state = Some(EnergyCounterState::new(raw_uj, self.wrap_uj, t_ns).map_err(err)?);
                Ok(None)
            }
            Some(prev) => {
                let r = power_from_energy_delta(&prev, raw_uj, t_ns, self.cap_watts).map_err(err)?;
                self.state = Some(r.state);
                let mut reading = Reading::new(self.domain.clone(), r.watts);
                reading.suspect |= r.suspect;
                Ok(Some(reading))
            }
        }
    }
}

/// One powercap zone directory.
#[derive(Clone, Debug, PartialEq)]
pub struct PowercapDomain {
    pub domain: PowerDomain,
    pub dir: PathBuf,
    pub wrap_uj: u64,
    /// Ten times the zone's maximum power, when it publishes one.
    pub default_cap_watts: Option<f64>,
}

fn read_trimmed(path: &Path) -> Result<String, PowerError> {
    fs::read_to_string(path)
        .map(|s| s.trim().to_string())
        .map_err(|source| PowerError::Io { path: path.to_path_buf(), source })
}

fn read_u64(path: &Path) -> Result<u64, PowerError> {
    let s = read_trimmed(path)?;
    s.parse().map_err(|_| PowerError::Parse { path: path.to_path_buf(), line: 1, msg: format!("not an integer: {s:?}") })
}

/// Maps powercap zone names to domains.
pub fn domain_from_zone_name(name: &str) -> PowerDomain {
    match name {
        "package-0" => PowerDomain::Pkg,
        "core" => PowerDomain::Pp0,
        "uncore" => PowerDomain::Pp1,
        "dram" => PowerDomain::Dram,
        other => {
            let tag = match other.strip_prefix("package-") {
                Some(n) => format!("PKG{n}"),
                None => other.to_ascii_uppercase(),
            };
            let tag: String = tag.chars().map(|c| if c.is_ascii_alphanumeric() { c } else { '_' }).collect();
            PowerDomain::Custom(tag)
        }
    }
}

impl PowercapDomain {
    pub fn probe(dir: &Path, domain: Option<PowerDomain>, wrap_uj: Option<u64>) -> Result<Self, PowerError> {
        let domain = match domain {
            Some(d) => d,
            None => domain_from_zone_name(&read_trimmed(&dir.join("name"))?),
        };
        let wrap_uj = match wrap_uj {
            Some(w) => w,
            None => read_u64(&dir.join("max_energy_range_uj")).map_err(|e| {
                PowerError::Spec(format!("{}: no wrap range ({e}); pass wrap=UJ", dir.display()))
            })?,
        };
        let default_cap_watts = read_u64(&dir.join("constraint_0_max_power_uw"))
            .ok()
            .filter(|&uw| uw > 0)
            .map(|uw| 10.0 * uw as f64 * 1e-6);
        // fail now, not at the first sample
        read_u64(&dir.join("energy_uj"))?;
        Ok(PowercapDomain { domain, dir: dir.to_path_buf(), wrap_uj, default_cap_watts })
    }
}

/// Live powercap counters, read back to back in configuration order.
pub struct PowercapSource {
    zones: Vec<PowercapDomain>,
    counters: Vec<Counter>,
    domains: Vec<PowerDomain>,
}

impl PowercapSource {
    pub fn open(
        dirs: &[(Option<PowerDomain>, PathBuf)],
        cap_watts: Option<f64>,
        wrap_uj: Option<u64>,
    ) -> Result<Self, PowerError> {
        let zones = dirs
            .iter()
            .map(|(d, p)| PowercapDomain::probe(p, d.clone(), wrap_uj))
            .collect::<Result<Vec<_>, _>>()?;
        let counters = zones
            .iter()
            .map(|z| Counter {
                domain: z.domain.clone(),
                wrap_uj: z.wrap_uj,
                cap_watts: cap_watts.or(z.default_cap_watts),
                state: None,
            })
            .collect();
        let domains = zones.iter().map(|z| z.domain.clone()).collect();
        Ok(PowercapSource { zones, counters, domains })
    }

    pub fn zones(&self) -> &[PowercapDomain] {
        &self.zones
    }
}

impl PowerSource for PowercapSource {
    fn domains(&self) -> &[PowerDomain] {
        &self.domains
    }

    fn read(&mut self, now_ns: u64) -> Result<Option<PowerSample>, PowerError> {
        let mut sample = PowerSample::new(now_ns);
        for (zone, counter) in self.zones.iter().zip(&mut self.counters) {
            let path = zone.dir.join("energy_uj");
            let raw = read_u64(&path).map_err(|e| PowerError::Read {
                domain: zone.domain.clone(),
                path: path.clone(),
                msg: e.to_string(),
            })?;
            if let Some(r) = counter.update(raw, now_ns)? {
                sample.readings.push(r);
            }
        }
        Ok(Some(sample))
    }
}

/// Replays recorded counter values, CSV `timestamp_ns,domain,energy_uj`.
///
/// Rows sharing a timestamp form one sample. The read time passed by the
/// caller is ignored.
pub struct CounterFileSource {
    frames: std::vec::IntoIter<(u64, Vec<(PowerDomain, u64)>)>,
    counters: Vec<Counter>,
    domains: Vec<PowerDomain>,
}

impl CounterFileSource {
    pub fn open(path: &Path, wrap_uj: u64, cap_watts: Option<f64>) -> Result<Self, PowerError> {
        let frames = read_counter_file(path)?;
        let mut domains: Vec<PowerDomain> = Vec::new();
        for (_, rows) in &frames {
            for (d, _) in rows {
                if !domains.contains(d) {
                    domains.push(d.clone());
                }
            }
        }
        let counters = domains
            .iter()
            .map(|d| Counter { domain: d.clone(), wrap_uj, cap_watts, state: None })
            .collect();
        Ok(CounterFileSource { frames: frames.into_iter(), counters, domains })
    }
}

/// Parses a counter file into timestamp frames.
pub fn read_counter_file(path: &Path) -> Result<Vec<(u64, Vec<(PowerDomain, u64)>)>, PowerError> {
    let rows = super::trace_file::read_rows(path, "energy_uj")?;
    let mut frames: Vec<(u64, Vec<(PowerDomain, u64)>)> = Vec::new();
    for (line, ts, domain, value) in rows {
        let bad = |msg: String| PowerError::Parse { path: path.to_path_buf(), line, msg };
        let uj: u64 = value.parse().map_err(|_| bad(format!("bad energy_uj {value:?}")))?;
        match frames.last_mut() {
            Some((t, rows)) if *t == ts => {
                if rows.iter().any(|(d, _)| *d == domain) {
                    return Err(bad(format!("domain {domain} repeated at {ts}")));
                }
                rows.push((domain, uj));
            }
            Some((t, _)) if *t > ts => return Err(bad("timestamps go backwards".into())),
            _ => frames.push((ts, vec![(domain, uj)])),
        }
    }
    Ok(frames)
}

impl PowerSource for CounterFileSource {
    fn domains(&self) -> &[PowerDomain] {
        &self.domains
    }

    fn read(&mut self, _now_ns: u64) -> Result<Option<PowerSample>, PowerError> {
        let Some((ts, rows)) = self.frames.next() else { return Ok(None) };
        let mut sample = PowerSample::new(ts);
        for c in &mut self.counters {
            if let Some((_, uj)) = rows.iter().find(|(d, _)| *d == c.domain) {
                if let Some(r) = c.update(*uj, ts)? {
                    sample.readings.push(r);
                }
            }
        }
        Ok(Some(sample))
    }
}
