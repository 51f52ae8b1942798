//! Profile reports.
//!
//! JSON is the canonical form (schema in `docs/report.schema.json`); CSV
//! flattens the estimate table and text is for people. All three come from
//! the same [`Report`] value. Rows are sorted by energy of the primary
//! domain, highest first; blocks of the block maps that were never sampled
//! follow with `n_k = 0` and no estimates.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use bbenergy_core::blockmap::BlockMapSet;
use bbenergy_core::model::unsampled_blocks;
use bbenergy_core::{BlockEstimate, BlockKey, CombinationKey, Granularity, Interval, PowerEstimate, Profile};
use serde::Serialize;

use crate::trace::Trace;

pub const REPORT_FORMAT: &str = "bbenergy-report/1";

/// Text output lists never-sampled blocks only up to this many.
const MAX_UNSAMPLED_LISTED: usize = 20;

#[derive(Clone, Copy, Debug, PartialEq, Eq, clap::ValueEnum)]
pub enum Format {
    Json,
    Csv,
    Text,
}

#[derive(Clone, Debug, Serialize, PartialEq)]
pub struct ConfigEcho {
    pub alpha: f64,
    pub z: f64,
    pub granularity: Granularity,
    pub primary_domain: Option<String>,
}

#[derive(Clone, Debug, Serialize, PartialEq)]
pub struct RunInfo {
    pub t_exec_s: f64,
    pub n: u64,
    pub n_samples: u64,
    pub thread_slots: usize,
    pub suspect_readings: u64,
    /// How power of multi-thread samples is assigned to blocks.
    pub power_attribution: &'static str,
    pub exit: Option<String>,
    pub partial: bool,
    /// Target stop time over execution time, when the trace records it.
    pub overhead: Option<f64>,
    /// Sampler metadata recorded in the trace.
    pub sampler: BTreeMap<String, String>,
}

#[derive(Clone, Debug, Serialize, PartialEq)]
pub struct DomainEstimate {
    pub domain: String,
    pub n_readings: u64,
    pub pow_hat_w: f64,
    pub pow_s_w: Option<f64>,
    pub pow_ci_w: [f64; 2],
    pub power_ci_computable: bool,
    pub e_hat_j: f64,
    pub e_ci_j: [f64; 2],
}

#[derive(Clone, Debug, Serialize, PartialEq)]
pub struct Row {
    pub key: String,
    pub label: String,
    pub n_k: u64,
    pub p_hat: Option<f64>,
    pub p_ci: Option<[f64; 2]>,
    pub ci_valid: Option<bool>,
    pub t_hat_s: Option<f64>,
    pub t_ci_s: Option<[f64; 2]>,
    /// Primary-domain power and energy, repeated from `power` for
    /// convenience.
    pub pow_hat_w: Option<f64>,
    pub e_hat_j: Option<f64>,
    pub e_ci_j: Option<[f64; 2]>,
    pub edp_js: Option<f64>,
    pub ed2p_js2: Option<f64>,
    pub power: Vec<DomainEstimate>,
}

#[derive(Clone, Debug, Serialize, PartialEq)]
pub struct DomainTotalRow {
    pub domain: String,
    pub n_readings: u64,
    pub estimated_j: f64,
    pub measured_j: f64,
    /// (estimated − measured) / measured.
    pub discrepancy: Option<f64>,
}

#[derive(Clone, Debug, Serialize, PartialEq)]
pub struct Totals {
    pub n_k: u64,
    pub p_hat: f64,
    pub t_hat_s: f64,
    pub e_hat_j: Option<f64>,
}

#[derive(Clone, Debug, Serialize, PartialEq)]
pub struct Report {
    pub format: &'static str,
    pub config: ConfigEcho,
    pub run: RunInfo,
    pub rows: Vec<Row>,
    pub totals: Totals,
    pub domain_totals: Vec<DomainTotalRow>,
}

fn pair(i: &Interval) -> [f64; 2] {
    [i.lower, i.upper]
}

fn block_label(maps: &BlockMapSet, b: &BlockKey) -> String {
    match b {
        BlockKey::Block { module, .. } => {
            let label = maps.label(b).unwrap_or("?");
            if maps.maps().nth(1).is_some() {
                format!("{}!{}", maps.module_name(*module).unwrap_or("?"), label)
            } else {
                label.to_string()
            }
        }
        BlockKey::Unknown { module: None } => "[unknown]".into(),
        BlockKey::Unknown { module: Some(m) } => format!("[unknown in {}]", maps.module_name(*m).unwrap_or("?")),
        BlockKey::Absent => "[absent]".into(),
    }
}

pub fn key_label(maps: &BlockMapSet, key: &CombinationKey) -> String {
    key.blocks().iter().map(|b| block_label(maps, b)).collect::<Vec<_>>().join(" | ")
}

fn domain_row(p: &PowerEstimate) -> DomainEstimate {
    DomainEstimate {
        domain: p.domain.to_string(),
        n_readings: p.n_readings,
        pow_hat_w: p.pow_hat,
        pow_s_w: p.pow_s,
        pow_ci_w: pair(&p.pow_ci),
        power_ci_computable: p.ci_computable(),
        e_hat_j: p.e_hat,
        e_ci_j: pair(&p.e_ci),
    }
}

fn estimate_row(profile: &Profile, maps: &BlockMapSet, e: &BlockEstimate) -> Row {
    let primary = profile.primary_power(e);
    let e_hat = primary.map(|p| p.e_hat);
    Row {
        key: e.key.to_string(),
        label: key_label(maps, &e.key),
        n_k: e.n_k,
        p_hat: Some(e.p_hat),
        p_ci: Some(pair(&e.p_ci)),
        ci_valid: Some(e.ci_valid),
        t_hat_s: Some(e.t_hat),
        t_ci_s: Some(pair(&e.t_ci)),
        pow_hat_w: primary.map(|p| p.pow_hat),
        e_hat_j: e_hat,
        e_ci_j: primary.map(|p| pair(&p.e_ci)),
        edp_js: e_hat.map(|en| en * e.t_hat),
        ed2p_js2: e_hat.map(|en| en * e.t_hat * e.t_hat),
        power: e.power.iter().map(domain_row).collect(),
    }
}

fn empty_row(maps: &BlockMapSet, b: &BlockKey) -> Row {
    Row {
        key: b.to_string(),
        label: block_label(maps, b),
        n_k: 0,
        p_hat: None,
        p_ci: None,
        ci_valid: None,
        t_hat_s: None,
        t_ci_s: None,
        pow_hat_w: None,
        e_hat_j: None,
        e_ci_j: None,
        edp_js: None,
        ed2p_js2: None,
        power: Vec::new(),
    }
}

/// Builds the report of `profile`. `trace` supplies run metadata when the
/// profile came from one.
pub fn build_report(profile: &Profile, maps: &BlockMapSet, trace: Option<&Trace>) -> Report {
    let mut rows: Vec<(&BlockEstimate, Row)> =
        profile.estimates.iter().map(|e| (e, estimate_row(profile, maps, e))).collect();
    rows.sort_by(|(ea, a), (eb, b)| {
        let ea_j = a.e_hat_j.unwrap_or(f64::NEG_INFINITY);
        let eb_j = b.e_hat_j.unwrap_or(f64::NEG_INFINITY);
        eb_j.total_cmp(&ea_j).then(eb.t_hat.total_cmp(&ea.t_hat)).then(ea.key.cmp(&eb.key))
    });
    let mut rows: Vec<Row> = rows.into_iter().map(|(_, r)| r).collect();
    let universe = maps.all_blocks();
    rows.extend(unsampled_blocks(profile, &universe).iter().map(|b| empty_row(maps, b)));

    let totals = Totals {
        n_k: profile.estimates.iter().map(|e| e.n_k).sum(),
        p_hat: profile.estimates.iter().map(|e| e.p_hat).sum(),
        t_hat_s: profile.estimates.iter().map(|e| e.t_hat).sum(),
        e_hat_j: profile.primary_domain.as_ref().map(|_| {
            profile.estimates.iter().filter_map(|e| profile.primary_power(e)).map(|p| p.e_hat).sum()
        }),
    };
    let domain_totals = profile
        .domain_totals
        .iter()
        .map(|d| DomainTotalRow {
            domain: d.domain.to_string(),
            n_readings: d.n_readings,
            estimated_j: d.estimated_energy,
            measured_j: d.measured_energy,
            discrepancy: (d.measured_energy > 0.0)
                .then(|| (d.estimated_energy - d.measured_energy) / d.measured_energy),
        })
        .collect();

    let sampler = trace.map(Trace::meta).unwrap_or_default();
    let overhead = sampler
        .get("stop_ns_total")
        .and_then(|s| s.parse::<f64>().ok())
        .filter(|_| profile.t_exec > 0.0)
        .map(|stop| stop * 1e-9 / profile.t_exec);
    let run = RunInfo {
        t_exec_s: profile.t_exec,
        n: profile.n,
        n_samples: profile.n_samples,
        thread_slots: profile.thread_slots,
        suspect_readings: profile.suspect_readings,
        power_attribution: if profile.granularity == Granularity::Block && profile.thread_slots > 1 {
            "shared-resource attribution"
        } else {
            "per-sample"
        },
        exit: sampler.get("exit").cloned(),
        partial: sampler.get("partial").is_some_and(|v| v == "true"),
        overhead,
        sampler,
    };
    Report {
        format: REPORT_FORMAT,
        config: ConfigEcho {
            alpha: profile.confidence.alpha(),
            z: profile.confidence.z(),
            granularity: profile.granularity,
            primary_domain: profile.primary_domain.as_ref().map(ToString::to_string),
        },
        run,
        rows,
        totals,
        domain_totals,
    }
}

/// Renders a report. `min_samples` hides rows with fewer samples from text
/// output only.
pub fn render(report: &Report, format: Format, min_samples: u64) -> String {
    match format {
        Format::Json => {
            let mut s = serde_json::to_string_pretty(report).expect("report serializes");
            s.push('\n');
            s
        }
        Format::Csv => render_csv(report),
        Format::Text => render_text(report, min_samples),
    }
}

fn opt<T: ToString>(v: Option<T>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

fn render_csv(report: &Report) -> String {
    let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(Vec::new());
    w.write_record([
        "key", "label", "n_k", "p_hat", "p_lower", "p_upper", "ci_valid", "t_hat_s", "t_lower_s", "t_upper_s",
        "pow_hat_w", "e_hat_j", "e_lower_j", "e_upper_j", "edp_js", "ed2p_js2",
    ])
    .expect("write to memory");
    for r in &report.rows {
        w.write_record([
            r.key.clone(),
            r.label.clone(),
            r.n_k.to_string(),
            opt(r.p_hat),
            opt(r.p_ci.map(|c| c[0])),
            opt(r.p_ci.map(|c| c[1])),
            opt(r.ci_valid),
            opt(r.t_hat_s),
            opt(r.t_ci_s.map(|c| c[0])),
            opt(r.t_ci_s.map(|c| c[1])),
            opt(r.pow_hat_w),
            opt(r.e_hat_j),
            opt(r.e_ci_j.map(|c| c[0])),
            opt(r.e_ci_j.map(|c| c[1])),
            opt(r.edp_js),
            opt(r.ed2p_js2),
        ])
        .expect("write to memory");
    }
    String::from_utf8(w.into_inner().expect("flush to memory")).expect("csv output is utf-8")
}

fn render_text(report: &Report, min_samples: u64) -> String {
    let mut s = String::new();
    let run = &report.run;
    let _ = writeln!(
        s,
        "t_exec {:.6} s   samples {}   observations {}   threads {}   confidence {:.1}%{}",
        run.t_exec_s,
        run.n_samples,
        run.n,
        run.thread_slots,
        (1.0 - report.config.alpha) * 100.0,
        report.config.primary_domain.as_ref().map(|d| format!("   power {d}")).unwrap_or_default()
    );
    if let Some(o) = run.overhead {
        let _ = writeln!(s, "stop overhead {:.3}%", o * 100.0);
    }
    if let Some(exit) = &run.exit {
        let _ = writeln!(s, "target {exit}{}", if run.partial { " (partial trace)" } else { "" });
    }
    if run.suspect_readings > 0 {
        let _ = writeln!(s, "suspect readings excluded: {}", run.suspect_readings);
    }
    if run.power_attribution != "per-sample" {
        let _ = writeln!(s, "power: {}", run.power_attribution);
    }
    s.push('\n');

    let hidden = report.rows.iter().filter(|r| r.n_k > 0 && r.n_k < min_samples).count();
    let width = report.rows.iter().map(|r| r.label.chars().count()).max().unwrap_or(5).clamp(5, 60);
    let _ = writeln!(
        s,
        "{:<width$}  {:>8}  {:>7}  {:>17}  {:>12}  {:>9}  {:>12}  {:>25}  {:>12}",
        "block", "n_k", "p", "p ci", "t (s)", "P (W)", "E (J)", "E ci (J)", "EDP (J s)"
    );
    let unsampled = report.rows.iter().filter(|r| r.n_k == 0).count();
    let list_unsampled = unsampled <= MAX_UNSAMPLED_LISTED;
    for r in report.rows.iter().filter(|r| r.n_k == 0 || r.n_k >= min_samples) {
        let label: String = r.label.chars().take(width).collect();
        if r.n_k == 0 {
            if list_unsampled {
                let _ = writeln!(s, "{label:<width$}  {:>8}  {:>7}", 0, "-");
            }
            continue;
        }
        let p_ci = r.p_ci.map(|c| format!("[{:.4},{:.4}]{}", c[0], c[1], if r.ci_valid == Some(true) { " " } else { "*" }));
        let e_ci = r.e_ci_j.map(|c| format!("[{:.4},{:.4}]", c[0], c[1]));
        let _ = writeln!(
            s,
            "{label:<width$}  {:>8}  {:>7.4}  {:>17}  {:>12.6}  {:>9}  {:>12}  {:>25}  {:>12}",
            r.n_k,
            r.p_hat.unwrap_or(0.0),
            p_ci.unwrap_or_default(),
            r.t_hat_s.unwrap_or(0.0),
            r.pow_hat_w.map(|v| format!("{v:.3}")).unwrap_or_else(|| "-".into()),
            r.e_hat_j.map(|v| format!("{v:.4}")).unwrap_or_else(|| "-".into()),
            e_ci.unwrap_or_default(),
            r.edp_js.map(|v| format!("{v:.4e}")).unwrap_or_else(|| "-".into()),
        );
    }
    let t = &report.totals;
    let _ = writeln!(
        s,
        "{:<width$}  {:>8}  {:>7.4}  {:>17}  {:>12.6}  {:>9}  {:>12}",
        "total",
        t.n_k,
        t.p_hat,
        "",
        t.t_hat_s,
        "",
        t.e_hat_j.map(|v| format!("{v:.4}")).unwrap_or_else(|| "-".into())
    );
    if !list_unsampled {
        let _ = writeln!(s, "({unsampled} blocks never sampled; listed in json and csv output)");
    }
    if hidden > 0 {
        let _ = writeln!(s, "({hidden} rows with fewer than {min_samples} samples hidden)");
    }
    if report.rows.iter().any(|r| r.ci_valid == Some(false)) {
        let _ = writeln!(s, "* normal approximation not valid (n·p ≤ 5 or n·(1−p) ≤ 5)");
    }
    if !report.domain_totals.is_empty() {
        s.push('\n');
        let _ = writeln!(s, "{:<14}  {:>14}  {:>14}  {:>11}", "domain", "estimated (J)", "measured (J)", "discrepancy");
        for d in &report.domain_totals {
            let _ = writeln!(
                s,
                "{:<14}  {:>14.4}  {:>14.4}  {:>11}",
                d.domain,
                d.estimated_j,
                d.measured_j,
                d.discrepancy.map(|x| format!("{:+.3}%", x * 100.0)).unwrap_or_else(|| "-".into())
            );
        }
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use bbenergy_core::blockmap::{AddressRange, BlockMap, MapGranularity};
    use bbenergy_core::{build_profile, PowerDomain, PowerSample, ProfileOptions, SampleRecord};

    fn maps() -> BlockMapSet {
        let mut set = BlockMapSet::new();
        let r = |s, e| AddressRange::new(s, e).unwrap();
        set.insert_with("app", |id| {
            BlockMap::new(
                id,
                "app",
                vec![("hot".into(), r(0x10, 0x20)), ("cold".into(), r(0x20, 0x30)), ("never".into(), r(0x30, 0x40))],
                MapGranularity::Block,
            )
        })
        .unwrap();
        set
    }

    fn profile() -> Profile {
        let hot = BlockKey::block(0, 0);
        let cold = BlockKey::block(0, 1);
        let samples: Vec<SampleRecord> = (0..20u64)
            .map(|i| SampleRecord {
                seq: i,
                wall_time_ns: i * 10,
                key: CombinationKey::single(if i % 4 == 0 { cold } else { hot }),
                power: PowerSample::new(i * 10).with_reading(PowerDomain::Pkg, if i % 4 == 0 { 5.0 } else { 10.0 + (i % 3) as f64 }),
            })
            .collect();
        build_profile(&samples, &ProfileOptions::new(2.0)).unwrap()
    }

    #[test]
    fn rows_sorted_by_energy_with_unsampled_last() {
        let r = build_report(&profile(), &maps(), None);
        let labels: Vec<&str> = r.rows.iter().map(|r| r.label.as_str()).collect();
        assert_eq!(labels, ["hot", "cold", "never"]);
        assert_eq!(r.rows[2].n_k, 0);
        assert!(r.rows[2].p_hat.is_none());
        assert_eq!(r.totals.n_k, 20);
        assert!((r.totals.p_hat - 1.0).abs() < 1e-12);
        assert!((r.totals.t_hat_s - 2.0).abs() < 1e-12);
        let hot = &r.rows[0];
        let e = hot.e_hat_j.unwrap();
        assert!((hot.edp_js.unwrap() - e * hot.t_hat_s.unwrap()).abs() < 1e-12);
        assert!((hot.ed2p_js2.unwrap() - e * hot.t_hat_s.unwrap().powi(2)).abs() < 1e-12);
    }

    #[test]
    fn min_samples_filters_text_only() {
        let r = build_report(&profile(), &maps(), None);
        let text = render(&r, Format::Text, 6);
        assert!(!text.lines().any(|l| l.starts_with("cold")));
        assert!(text.contains("1 rows with fewer than 6 samples hidden"));
        assert!(render(&r, Format::Json, 6).contains("\"cold\""));
        assert!(render(&r, Format::Csv, 6).contains(",cold,"));
    }

    #[test]
    fn csv_has_one_line_per_row() {
        let r = build_report(&profile(), &maps(), None);
        let csv = render(&r, Format::Csv, 0);
        assert_eq!(csv.lines().count(), 1 + r.rows.len());
        assert!(csv.lines().nth(3).unwrap().starts_with("0:2,never,0,,"));
    }

    #[test]
    fn rendering_is_deterministic() {
        let a = render(&build_report(&profile(), &maps(), None), Format::Json, 0);
        let b = render(&build_report(&profile(), &maps(), None), Format::Json, 0);
        assert_eq!(a, b);
    }
}
