//! Power sources.
//!
//! A source is described by a spec string:
//!
//! | spec | backend |
//! |---|---|
//! | `rapl:DIR[+DIR...][;cap=W][;wrap=UJ]` | powercap energy counters, one directory per domain; `DOMAIN=DIR` overrides the name file |
//! | `meter:DOMAIN=PATH[+...][;unit=uw\|mw\|w]` | direct meters exposing averaged power in a file |
//! | `counters:PATH;wrap=UJ[;cap=W]` | recorded counter values, CSV `timestamp_ns,domain,energy_uj` |
//! | `replay:PATH` | power trace, CSV `timestamp_ns,domain,watts` |
//! | `mock:DOMAIN=W[+...]` | constant readings |
//! | `none` | no power readings |

mod counter;
mod meter;
mod trace_file;

use std::fs::File;
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use bbenergy_core::{PowerDomain, PowerSample};
use thiserror::Error;

pub use counter::{CounterFileSource, PowercapDomain, PowercapSource};
pub use meter::{MeterSource, MeterUnit};
pub use trace_file::{read_power_trace, PowerTraceWriter, ReplaySource};

#[derive(Debug, Error)]
pub enum PowerError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{domain}: reading {path}: {msg}")]
    Read { domain: PowerDomain, path: PathBuf, msg: String },
    #[error("{path}:{line}: {msg}")]
    Parse { path: PathBuf, line: u64, msg: String },
    #[error("invalid power source: {0}")]
    Spec(String),
    #[error("{domain}: {source}")]
    Counter {
        domain: PowerDomain,
        #[source]
        source: bbenergy_core::Error,
    },
}

pub trait PowerSource {
    /// Domains this source reports, in reading order.
    fn domains(&self) -> &[PowerDomain];

    /// Takes one reading at time `now_ns`. `Ok(None)` is end of stream.
    fn read(&mut self, now_ns: u64) -> Result<Option<PowerSample>, PowerError>;
}

impl<S: PowerSource + ?Sized> PowerSource for &mut S {
    fn domains(&self) -> &[PowerDomain] {
        (**self).domains()
    }

    fn read(&mut self, now_ns: u64) -> Result<Option<PowerSample>, PowerError> {
        (**self).read(now_ns)
    }
}

impl<S: PowerSource + ?Sized> PowerSource for Box<S> {
    fn domains(&self) -> &[PowerDomain] {
        (**self).domains()
    }

    fn read(&mut self, now_ns: u64) -> Result<Option<PowerSample>, PowerError> {
        (**self).read(now_ns)
    }
}

/// Parsed source description.
#[derive(Clone, Debug, PartialEq)]
pub enum SourceSpec {
    Powercap { dirs: Vec<(Option<PowerDomain>, PathBuf)>, cap_watts: Option<f64>, wrap_uj: Option<u64> },
    Meter { entries: Vec<(PowerDomain, PathBuf)>, unit: MeterUnit },
    CounterFile { path: PathBuf, wrap_uj: u64, cap_watts: Option<f64> },
    Replay(PathBuf),
    Mock(Vec<(PowerDomain, f64)>),
    None,
}

fn spec_err(msg: impl Into<String>) -> PowerError {
    PowerError::Spec(msg.into())
}

fn parse_domain(s: &str) -> Result<PowerDomain, PowerError> {
    s.parse().map_err(|_| spec_err(format!("bad domain name {s:?}")))
}

fn split_options(rest: &str) -> Result<(&str, Vec<(&str, &str)>), PowerError> {
    let mut parts = rest.split(';');
    let main = parts.next().unwrap_or("");
    let opts = parts
        .map(|o| o.split_once('=').ok_or_else(|| spec_err(format!("option {o:?} is not key=value"))))
        .collect::<Result<Vec<_>, _>>()?;
    Ok((main, opts))
}

fn parse_num<T: FromStr>(key: &str, v: &str) -> Result<T, PowerError> {
    v.parse().map_err(|_| spec_err(format!("bad value for {key}: {v:?}")))
}

impl FromStr for SourceSpec {
    type Err = PowerError;

    fn from_str(s: &str) -> Result<Self, PowerError> {
        if s == "none" {
            return Ok(SourceSpec::None);
        }
        let (kind, rest) = s.split_once(':').ok_or_else(|| spec_err(format!("{s:?} has no backend prefix")))?;
        let (main, opts) = split_options(rest)?;
        if main.is_empty() {
            return Err(spec_err(format!("{s:?} names no device")));
        }
        let mut cap_watts = None;
        let mut wrap_uj = None;
        let mut unit = MeterUnit::Microwatts;
        for (k, v) in opts {
            match (kind, k) {
                ("rapl" | "counters", "cap") => {
                    let c: f64 = parse_num(k, v)?;
                    if !(c > 0.0 && c.is_finite()) {
                        return Err(spec_err("cap must be positive"));
                    }
                    cap_watts = Some(c);
                }
                ("rapl" | "counters", "wrap") => wrap_uj = Some(parse_num(k, v)?),
                ("meter", "unit") => unit = v.parse()?,
                _ => return Err(spec_err(format!("unknown option {k:?} for {kind}"))),
            }
        }
        let named = |item: &str| -> Result<(PowerDomain, String), PowerError> {
            let (d, v) = item.split_once('=').ok_or_else(|| spec_err(format!("{item:?} is not DOMAIN=VALUE")))?;
            Ok((parse_domain(d)?, v.to_string()))
        };
        Ok(match kind {
            "rapl" => {
                let dirs = main
                    .split('+')
                    .map(|item| match item.split_once('=') {
                        Some((d, p)) => Ok((Some(parse_domain(d)?), PathBuf::from(p))),
                        None => Ok((None, PathBuf::from(item))),
                    })
                    .collect::<Result<_, PowerError>>()?;
                SourceSpec::Powercap { dirs, cap_watts, wrap_uj }
            }
            "meter" => SourceSpec::Meter {
                entries: main
                    .split('+')
                    .map(|i| named(i).map(|(d, p)| (d, PathBuf::from(p))))
                    .collect::<Result<_, _>>()?,
                unit,
            },
            "counters" => SourceSpec::CounterFile {
                path: PathBuf::from(main),
                wrap_uj: wrap_uj.ok_or_else(|| spec_err("counters source needs wrap=UJ"))?,
                cap_watts,
            },
            "replay" => SourceSpec::Replay(PathBuf::from(main)),
            "mock" => SourceSpec::Mock(
                main.split('+')
                    .map(|i| {
                        let (d, w) = named(i)?;
                        Ok((d, parse_num::<f64>("watts", &w)?))
                    })
                    .collect::<Result<_, PowerError>>()?,
            ),
            other => return Err(spec_err(format!("unknown backend {other:?}"))),
        })
    }
}

fn check_unique(domains: &[PowerDomain]) -> Result<(), PowerError> {
    for (i, d) in domains.iter().enumerate() {
        if domains[..i].contains(d) {
            return Err(spec_err(format!("domain {d} appears twice")));
        }
    }
    Ok(())
}

/// Opens the backend a spec names.
pub fn open_source(spec: &SourceSpec) -> Result<Box<dyn PowerSource>, PowerError> {
    let src: Box<dyn PowerSource> = match spec {
        SourceSpec::Powercap { dirs, cap_watts, wrap_uj } => {
            Box::new(PowercapSource::open(dirs, *cap_watts, *wrap_uj)?)
        }
        SourceSpec::Meter { entries, unit } => Box::new(MeterSource::open(entries, *unit)?),
        SourceSpec::CounterFile { path, wrap_uj, cap_watts } => {
            Box::new(CounterFileSource::open(path, *wrap_uj, *cap_watts)?)
        }
        SourceSpec::Replay(path) => Box::new(ReplaySource::open(path)?),
        SourceSpec::Mock(entries) => Box::new(MockSource::new(entries.clone())),
        SourceSpec::None => Box::new(MockSource::new(Vec::new())),
    };
    check_unique(src.domains())?;
    Ok(src)
}

/// Constant readings stamped with the read time.
#[derive(Clone, Debug)]
pub struct MockSource {
    domains: Vec<PowerDomain>,
    watts: Vec<f64>,
}

impl MockSource {
    pub fn new(entries: Vec<(PowerDomain, f64)>) -> Self {
        let (domains, watts) = entries.into_iter().unzip();
        MockSource { domains, watts }
    }
}

impl PowerSource for MockSource {
    fn domains(&self) -> &[PowerDomain] {
        &self.domains
    }

    fn read(&mut self, now_ns: u64) -> Result<Option<PowerSample>, PowerError> {
        let mut s = PowerSample::new(now_ns);
        for (d, w) in self.domains.iter().zip(&self.watts) {
            s = s.with_reading(d.clone(), *w);
        }
        Ok(Some(s))
    }
}

/// Re-reads once when a source returns the same timestamp twice in a row,
/// and flags the readings suspect if the retry is stale too.
pub struct StaleGuard<S> {
    inner: S,
    last_ts: Option<u64>,
    flagged: u64,
}

impl<S: PowerSource> StaleGuard<S> {
    pub fn new(inner: S) -> Self {
        StaleGuard { inner, last_ts: None, flagged: 0 }
    }

    /// Samples flagged stale so far.
    pub fn flagged(&self) -> u64 {
        self.flagged
    }

    pub fn into_inner(self) -> S {
        self.inner
    }
}

impl<S: PowerSource> PowerSource for StaleGuard<S> {
    fn domains(&self) -> &[PowerDomain] {
        self.inner.domains()
    }

    fn read(&mut self, now_ns: u64) -> Result<Option<PowerSample>, PowerError> {
        let mut sample = match self.inner.read(now_ns)? {
            Some(s) => s,
            None => return Ok(None),
        };
        if Some(sample.timestamp_ns) == self.last_ts {
            sample = match self.inner.read(now_ns)? {
                Some(s) => s,
                None => return Ok(None),
            };
            if Some(sample.timestamp_ns) == self.last_ts {
                self.flagged += 1;
                sample.readings.iter_mut().for_each(|r| r.suspect = true);
            }
        }
        self.last_ts = Some(sample.timestamp_ns);
        Ok(Some(sample))
    }
}

/// Copies every sample read to a power trace file.
pub struct Recorder<S> {
    inner: S,
    out: PowerTraceWriter<BufWriter<File>>,
    path: PathBuf,
}

impl<S: PowerSource> Recorder<S> {
    pub fn create(inner: S, path: &Path) -> Result<Self, PowerError> {
        let io = |source| PowerError::Io { path: path.to_path_buf(), source };
        let file = File::create(path).map_err(io)?;
        let out = PowerTraceWriter::new(BufWriter::new(file)).map_err(io)?;
        Ok(Recorder { inner, out, path: path.to_path_buf() })
    }

    pub fn finish(self) -> Result<S, PowerError> {
        self.out.finish().map_err(|source| PowerError::Io { path: self.path.clone(), source })?;
        Ok(self.inner)
    }
}

impl<S: PowerSource> PowerSource for Recorder<S> {
    fn domains(&self) -> &[PowerDomain] {
        self.inner.domains()
    }

    fn read(&mut self, now_ns: u64) -> Result<Option<PowerSample>, PowerError> {
        let s = self.inner.read(now_ns)?;
        if let Some(s) = &s {
            self.out
                .write_sample(s)
                .map_err(|source| PowerError::Io { path: self.path.clone(), source })?;
        }
        Ok(s)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_specs() {
        assert_eq!(
            "mock:PKG=9.5+DRAM=1".parse::<SourceSpec>().unwrap(),
            SourceSpec::Mock(vec![(PowerDomain::Pkg, 9.5), (PowerDomain::Dram, 1.0)])
        );
        assert_eq!(
            "rapl:/sys/class/powercap/intel-rapl:0+DRAM=/x/intel-rapl:0:2;cap=500".parse::<SourceSpec>().unwrap(),
            SourceSpec::Powercap {
                dirs: vec![
                    (None, PathBuf::from("/sys/class/powercap/intel-rapl:0")),
                    (Some(PowerDomain::Dram), PathBuf::from("/x/intel-rapl:0:2")),
                ],
                cap_watts: Some(500.0),
                wrap_uj: None,
            }
        );
        assert_eq!(
            "meter:BIG_CLUSTER=/dev/a+GPU=/dev/b;unit=mw".parse::<SourceSpec>().unwrap(),
            SourceSpec::Meter {
                entries: vec![(PowerDomain::BigCluster, "/dev/a".into()), (PowerDomain::Gpu, "/dev/b".into())],
                unit: MeterUnit::Milliwatts,
            }
        );
        assert_eq!("none".parse::<SourceSpec>().unwrap(), SourceSpec::None);
        for bad in ["", "mock", "foo:x", "mock:PKG", "counters:f.csv", "rapl:d;cap=-1", "meter:PKG=/a;unit=kw", "rapl:d;bogus=1", "mock:PKG=x"] {
            assert!(bad.parse::<SourceSpec>().is_err(), "{bad}");
        }
    }

    #[test]
    fn mock_reads_constant() {
        let mut s = open_source(&"mock:PKG=9.5".parse().unwrap()).unwrap();
        let r = s.read(123).unwrap().unwrap();
        assert_eq!(r.timestamp_ns, 123);
        assert_eq!(r.watts(&PowerDomain::Pkg), Some(9.5));
    }

    #[test]
    fn duplicate_domains_rejected() {
        assert!(open_source(&"mock:PKG=1+PKG=2".parse().unwrap()).is_err());
    }

    struct Frozen(u64, u32);
    impl PowerSource for Frozen {
        fn domains(&self) -> &[PowerDomain] {
            &[]
        }
        fn read(&mut self, _: u64) -> Result<Option<PowerSample>, PowerError> {
            self.1 += 1;
            Ok(Some(PowerSample::new(self.0).with_reading(PowerDomain::Pkg, 1.0)))
        }
    }

    #[test]
    fn stale_readings_retried_then_flagged() {
        let mut g = StaleGuard::new(Frozen(5, 0));
        assert!(!g.read(0).unwrap().unwrap().readings[0].suspect);
        assert!(g.read(1).unwrap().unwrap().readings[0].suspect);
        assert_eq!(g.flagged(), 1);
        assert_eq!(g.into_inner().1, 3);
    }
}
