//! The sample-trace file.
//!
//! One record per line:
//!
//! ```text
//! seq,wall_time_ns,tid:ip_hex[;tid:ip_hex...],DOMAIN=watts[!][;DOMAIN=watts...]
//! ```
//!
//! Instruction pointers are lowercase hex without prefix. A trailing `!` on a
//! reading marks it suspect. Lines starting with `#` are comments, except
//! `# key=value` lines which carry run metadata:
//!
//! * `# t_exec_ns=N` measured execution time of the run
//! * `# module=NAME,START,END,BIAS` a loaded module's runtime extent (hex)
//! * anything else is kept as opaque sampler metadata
//!
//! Parsing keeps every line, so writing a parsed trace reproduces the input
//! byte for byte when the input is in canonical form.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};

use bbenergy_core::blockmap::{AddressRange, BlockMapSet, ModuleRegion};
use bbenergy_core::{BlockKey, CombinationKey, PowerDomain, PowerSample, Reading, SampleRecord};
use thiserror::Error;

use crate::blockmap_io::parse_hex;

#[derive(Debug, Error)]
pub enum TraceError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("line {line}: {msg}")]
    Malformed { line: usize, msg: String },
    #[error("trace has no sample records")]
    Empty,
    #[error("trace has no t_exec_ns line")]
    MissingTExec,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ThreadIp {
    pub tid: u32,
    pub ip: u64,
}

/// One observation as taken from the target, before address resolution.
#[derive(Clone, Debug, PartialEq)]
pub struct RawSample {
    pub seq: u64,
    pub wall_time_ns: u64,
    pub threads: Vec<ThreadIp>,
    pub power: PowerSample,
}

#[derive(Clone, Debug, PartialEq)]
pub enum TraceLine {
    Record(RawSample),
    TExec(u64),
    Module(ModuleRegion),
    Meta { key: String, value: String },
    Comment(String),
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Trace {
    pub lines: Vec<TraceLine>,
}

/// Receives trace lines as they are produced.
pub trait TraceSink {
    fn write_line(&mut self, line: &TraceLine) -> io::Result<()>;
}

impl<T: TraceSink + ?Sized> TraceSink for &mut T {
    fn write_line(&mut self, line: &TraceLine) -> io::Result<()> {
        (**self).write_line(line)
    }
}

impl TraceSink for Vec<TraceLine> {
    fn write_line(&mut self, line: &TraceLine) -> io::Result<()> {
        self.push(line.clone());
        Ok(())
    }
}

/// Writes lines to any `io::Write`.
pub struct TraceWriter<W: Write> {
    out: W,
}

impl<W: Write> TraceWriter<W> {
    pub fn new(out: W) -> Self {
        TraceWriter { out }
    }

    pub fn into_inner(self) -> W {
        self.out
    }
}

impl<W: Write> TraceSink for TraceWriter<W> {
    fn write_line(&mut self, line: &TraceLine) -> io::Result<()> {
        writeln!(self.out, "{}", format_line(line))
    }
}

fn is_meta_key(k: &str) -> bool {
    !k.is_empty() && k.bytes().all(|b| b.is_ascii_alphanumeric() || b == b'_')
}

pub fn format_line(line: &TraceLine) -> String {
    match line {
        TraceLine::Record(r) => format_record(r),
        TraceLine::TExec(ns) => format!("# t_exec_ns={ns}"),
        TraceLine::Module(m) => format!(
            "# module={},{:x},{:x},{:x}",
            m.name,
            m.range.start(),
            m.range.end(),
            m.load_bias
        ),
        TraceLine::Meta { key, value } => format!("# {key}={value}"),
        TraceLine::Comment(c) => c.clone(),
    }
}

fn format_record(r: &RawSample) -> String {
    let mut s = format!("{},{},", r.seq, r.wall_time_ns);
    for (i, t) in r.threads.iter().enumerate() {
        if i > 0 {
            s.push(';');
        }
        let _ = write!(s, "{}:{:x}", t.tid, t.ip);
    }
    s.push(',');
    for (i, rd) in r.power.readings.iter().enumerate() {
        if i > 0 {
            s.push(';');
        }
        let _ = write!(s, "{}={}", rd.domain, rd.watts);
        if rd.suspect {
            s.push('!');
        }
    }
    s
}

pub fn parse_line(text: &str, line: usize) -> Result<TraceLine, TraceError> {
    let bad = |msg: String| TraceError::Malformed { line, msg };
    if let Some(rest) = text.strip_prefix("# ") {
        if let Some((key, value)) = rest.split_once('=') {
            if is_meta_key(key) {
                return match key {
                    "t_exec_ns" => value
                        .parse()
                        .map(TraceLine::TExec)
                        .map_err(|_| bad(format!("bad t_exec_ns {value:?}"))),
                    "module" => parse_module(value).map(TraceLine::Module).ok_or_else(|| bad(format!("bad module line {value:?}"))),
                    _ => Ok(TraceLine::Meta { key: key.to_string(), value: value.to_string() }),
                };
            }
        }
    }
    if text.starts_with('#') || text.trim().is_empty() {
        return Ok(TraceLine::Comment(text.to_string()));
    }
    parse_record(text).map(TraceLine::Record).map_err(bad)
}

fn parse_module(v: &str) -> Option<ModuleRegion> {
    let mut it = v.rsplitn(4, ',');
    let bias = parse_hex(it.next()?)?;
    let end = parse_hex(it.next()?)?;
    let start = parse_hex(it.next()?)?;
    let name = it.next()?;
    if name.is_empty() {
        return None;
    }
    Some(ModuleRegion { name: name.to_string(), range: AddressRange::new(start, end).ok()?, load_bias: bias })
}

fn parse_record(text: &str) -> Result<RawSample, String> {
    let fields: Vec<&str> = text.split(',').collect();
    if fields.len() != 4 {
        return Err(format!("expected 4 comma-separated fields, found {}", fields.len()));
    }
    let seq: u64 = fields[0].parse().map_err(|_| format!("bad seq {:?}", fields[0]))?;
    let wall: u64 = fields[1].parse().map_err(|_| format!("bad wall_time_ns {:?}", fields[1]))?;
    let mut threads = Vec::new();
    if !fields[2].is_empty() {
        for item in fields[2].split(';') {
            let (tid, ip) = item.split_once(':').ok_or_else(|| format!("bad thread entry {item:?}"))?;
            let tid = tid.parse().map_err(|_| format!("bad tid {tid:?}"))?;
            let ip = parse_hex(ip).ok_or_else(|| format!("bad ip {ip:?}"))?;
            if threads.iter().any(|t: &ThreadIp| t.tid == tid) {
                return Err(format!("tid {tid} listed twice"));
            }
            threads.push(ThreadIp { tid, ip });
        }
    }
    let mut power = PowerSample::new(wall);
    if !fields[3].is_empty() {
        for item in fields[3].split(';') {
            let (domain, watts) = item.split_once('=').ok_or_else(|| format!("bad reading {item:?}"))?;
            let domain: PowerDomain = domain.parse().map_err(|_| format!("bad domain {domain:?}"))?;
            let (watts, flagged) = match watts.strip_suffix('!') {
                Some(w) => (w, true),
                None => (watts, false),
            };
            let watts: f64 = watts.parse().map_err(|_| format!("bad watts {watts:?}"))?;
            if power.readings.iter().any(|r| r.domain == domain) {
                return Err(format!("domain {domain} listed twice"));
            }
            let mut reading = Reading::new(domain, watts);
            reading.suspect |= flagged;
            power.readings.push(reading);
        }
    }
    Ok(RawSample { seq, wall_time_ns: wall, threads, power })
}

impl Trace {
    pub fn parse(text: &str) -> Result<Trace, TraceError> {
        let lines = text
            .lines()
            .enumerate()
            .map(|(i, l)| parse_line(l, i + 1))
            .collect::<Result<_, _>>()?;
        Ok(Trace { lines })
    }

    pub fn read(path: &Path) -> Result<Trace, TraceError> {
        let text = fs::read_to_string(path).map_err(|source| TraceError::Io { path: path.to_path_buf(), source })?;
        Trace::parse(&text)
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for l in &self.lines {
            s.push_str(&format_line(l));
            s.push('\n');
        }
        s
    }

    pub fn write_to(&self, sink: &mut dyn TraceSink) -> io::Result<()> {
        self.lines.iter().try_for_each(|l| sink.write_line(l))
    }

    pub fn records(&self) -> impl Iterator<Item = &RawSample> {
        self.lines.iter().filter_map(|l| match l {
            TraceLine::Record(r) => Some(r),
            _ => None,
        })
    }

    pub fn modules(&self) -> impl Iterator<Item = &ModuleRegion> {
        self.lines.iter().filter_map(|l| match l {
            TraceLine::Module(m) => Some(m),
            _ => None,
        })
    }

    /// The last `t_exec_ns` line, if any.
    pub fn t_exec_ns(&self) -> Option<u64> {
        self.lines.iter().rev().find_map(|l| match l {
            TraceLine::TExec(ns) => Some(*ns),
            _ => None,
        })
    }

    /// Opaque metadata; later lines win.
    pub fn meta(&self) -> BTreeMap<String, String> {
        self.lines
            .iter()
            .filter_map(|l| match l {
                TraceLine::Meta { key, value } => Some((key.clone(), value.clone())),
                _ => None,
            })
            .collect()
    }
}

/// Resolves every record against `maps`.
///
/// Module lines are registered as runtime regions first. Thread ids get
/// slots in order of first appearance; a thread missing from a record holds
/// `Absent` in its slot.
/// Seconds from a nanosecond count, the one conversion every consumer of
/// `t_exec_ns` uses.
pub fn ns_to_s(ns: u64) -> f64 {
    ns as f64 / 1e9
}

pub fn resolve_samples(trace: &Trace, maps: &mut BlockMapSet) -> Result<Vec<SampleRecord>, TraceError> {
    for m in trace.modules() {
        maps.add_region(m);
    }
    let mut slots: Vec<u32> = Vec::new();
    for r in trace.records() {
        for t in &r.threads {
            if !slots.contains(&t.tid) {
                slots.push(t.tid);
            }
        }
    }
    let out: Vec<SampleRecord> = trace
        .records()
        .map(|r| {
            let mut key = vec![BlockKey::Absent; slots.len()];
            for t in &r.threads {
                let slot = slots.iter().position(|&s| s == t.tid).expect("slot assigned above");
                key[slot] = maps.resolve(t.ip);
            }
            SampleRecord {
                seq: r.seq,
                wall_time_ns: r.wall_time_ns,
                key: CombinationKey::new(key),
                power: r.power.clone(),
            }
        })
        .collect();
    if out.is_empty() {
        return Err(TraceError::Empty);
    }
    Ok(out)
}
