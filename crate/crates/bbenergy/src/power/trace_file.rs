//! Power trace files: CSV `timestamp_ns,domain,watts`, one row per reading.
//!
//! Watts are written in shortest round-trip form, so reading a file and
//! writing it back reproduces it byte for byte. Suspect flags are not
//! stored; on replay only negative or non-finite values come back suspect.

use std::io::{self, Write};
use std::path::{Path, PathBuf};

use bbenergy_core::{PowerDomain, PowerSample, Reading};

use super::{PowerError, PowerSource};

const HEADER: [&str; 3] = ["timestamp_ns", "domain", "watts"];

/// Rows of a three-column timestamp/domain/value file with their line
/// numbers.
pub(super) fn read_rows(path: &Path, value_column: &str) -> Result<Vec<(u64, u64, PowerDomain, String)>, PowerError> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_path(path)
        .map_err(|e| csv_err(path, e))?;
    let headers = rdr.headers().map_err(|e| csv_err(path, e))?.clone();
    if headers.iter().collect::<Vec<_>>() != [HEADER[0], HEADER[1], value_column] {
        return Err(PowerError::Parse {
            path: path.to_path_buf(),
            line: 1,
            msg: format!("expected header timestamp_ns,domain,{value_column}"),
        });
    }
    let mut out = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| csv_err(path, e))?;
        let line = rec.position().map_or(0, |p| p.line());
        let bad = |msg: String| PowerError::Parse { path: path.to_path_buf(), line, msg };
        let ts: u64 = rec[0].parse().map_err(|_| bad(format!("bad timestamp {:?}", &rec[0])))?;
        let domain: PowerDomain = rec[1].parse().map_err(|_| bad(format!("bad domain {:?}", &rec[1])))?;
        out.push((line, ts, domain, rec[2].to_string()));
    }
    Ok(out)
}

fn csv_err(path: &Path, e: csv::Error) -> PowerError {
    let line = e.position().map_or(0, |p| p.line());
    match e.into_kind() {
        csv::ErrorKind::Io(source) => PowerError::Io { path: path.to_path_buf(), source },
        kind => PowerError::Parse { path: path.to_path_buf(), line, msg: format!("{kind:?}") },
    }
}

/// Reads a power trace, grouping rows with equal timestamps into samples.
pub fn read_power_trace(path: &Path) -> Result<Vec<PowerSample>, PowerError> {
    let mut out: Vec<PowerSample> = Vec::new();
    for (line, ts, domain, value) in read_rows(path, "watts")? {
        let bad = |msg: String| PowerError::Parse { path: path.to_path_buf(), line, msg };
        let watts: f64 = value.parse().map_err(|_| bad(format!("bad watts {value:?}")))?;
        match out.last_mut() {
            Some(s) if s.timestamp_ns == ts => {
                if s.readings.iter().any(|r| r.domain == domain) {
                    return Err(bad(format!("domain {domain} repeated at {ts}")));
                }
                s.readings.push(Reading::new(domain, watts));
            }
            Some(s) if s.timestamp_ns > ts => return Err(bad("timestamps go backwards".into())),
            _ => out.push(PowerSample { timestamp_ns: ts, readings: vec![Reading::new(domain, watts)] }),
        }
    }
    Ok(out)
}

pub struct PowerTraceWriter<W: Write> {
    out: csv::Writer<W>,
}

impl<W: Write> PowerTraceWriter<W> {
    pub fn new(out: W) -> io::Result<Self> {
        let mut out = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(out);
        out.write_record(HEADER)?;
        Ok(PowerTraceWriter { out })
    }

    pub fn write_sample(&mut self, s: &PowerSample) -> io::Result<()> {
        for r in &s.readings {
            self.out.write_record([s.timestamp_ns.to_string(), r.domain.to_string(), r.watts.to_string()])?;
        }
        Ok(())
    }

    pub fn finish(self) -> io::Result<W> {
        self.out.into_inner().map_err(|e| e.into_error())
    }
}

/// Replays a power trace in file order, ignoring the read time.
pub struct ReplaySource {
    samples: std::vec::IntoIter<PowerSample>,
    domains: Vec<PowerDomain>,
    path: PathBuf,
}

impl ReplaySource {
    pub fn open(path: &Path) -> Result<Self, PowerError> {
        let samples = read_power_trace(path)?;
        let mut domains: Vec<PowerDomain> = Vec::new();
        for s in &samples {
            for r in &s.readings {
                if !domains.contains(&r.domain) {
                    domains.push(r.domain.clone());
                }
            }
        }
        Ok(ReplaySource { samples: samples.into_iter(), domains, path: path.to_path_buf() })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }
}

impl PowerSource for ReplaySource {
    fn domains(&self) -> &[PowerDomain] {
        &self.domains
    }

    fn read(&mut self, _now_ns: u64) -> Result<Option<PowerSample>, PowerError> {
        Ok(self.samples.next())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::fs;

    const TRACE: &str = "timestamp_ns,domain,watts\n0,PKG,9.5\n10000000,PKG,10.25\n10000000,DRAM,1.5\n20000000,PKG,0.1\n";

    #[test]
    fn replay_yields_samples_in_order_then_ends() {
        let f = tempfile::NamedTempFile::new().unwrap();
        fs::write(f.path(), TRACE).unwrap();
        let mut src = ReplaySource::open(f.path()).unwrap();
        assert_eq!(src.domains(), &[PowerDomain::Pkg, PowerDomain::Dram]);
        let ts: Vec<u64> = std::iter::from_fn(|| src.read(0).unwrap()).map(|s| s.timestamp_ns).collect();
        assert_eq!(ts, [0, 10_000_000, 20_000_000]);
        assert!(src.read(0).unwrap().is_none());
    }

    #[test]
    fn file_round_trip_is_byte_exact() {
        let f = tempfile::NamedTempFile::new().unwrap();
        fs::write(f.path(), TRACE).unwrap();
        let samples = read_power_trace(f.path()).unwrap();
        let mut w = PowerTraceWriter::new(Vec::new()).unwrap();
        samples.iter().for_each(|s| w.write_sample(s).unwrap());
        assert_eq!(String::from_utf8(w.finish().unwrap()).unwrap(), TRACE);
    }

    #[test]
    fn bad_files() {
        for body in [
            "ts,domain,watts\n",
            "timestamp_ns,domain,watts\n1,PKG,x\n",
            "timestamp_ns,domain,watts\n2,PKG,1\n1,PKG,1\n",
            "timestamp_ns,domain,watts\n1,,1\n",
        ] {
            let f = tempfile::NamedTempFile::new().unwrap();
            fs::write(f.path(), body).unwrap();
            assert!(read_power_trace(f.path()).is_err(), "{body}");
        }
        assert!(read_power_trace(Path::new("/nonexistent.csv")).unwrap_err().to_string().contains("/nonexistent.csv"));
    }

    proptest! {
        #[test]
        fn watts_survive_round_trip(ws in prop::collection::vec(0.0f64..1e6, 1..20)) {
            let mut w = PowerTraceWriter::new(Vec::new()).unwrap();
            let samples: Vec<PowerSample> = ws
                .iter()
                .enumerate()
                .map(|(i, &x)| PowerSample::new(i as u64).with_reading(PowerDomain::Pkg, x))
                .collect();
            samples.iter().for_each(|s| w.write_sample(s).unwrap());
            let bytes = w.finish().unwrap();
            let f = tempfile::NamedTempFile::new().unwrap();
            fs::write(f.path(), &bytes).unwrap();
            prop_assert_eq!(read_power_trace(f.path()).unwrap(), samples);
        }
    }
}
