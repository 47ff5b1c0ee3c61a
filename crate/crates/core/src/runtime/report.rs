//! Run summaries, their on-disk layout and table rendering.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{domain_means, AdaptationRecord, Method, RunConfig};
use crate::benchgen::Domain;
use crate::error::{Error, Result};

pub const SUMMARY_FILE: &str = "summary.json";
pub const RECORDS_FILE: &str = "records.jsonl";
pub const CONFIG_FILE: &str = "config.toml";

/// Aggregate DSC of a run, in percentage points.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub method: Method,
    /// One map per completed round.
    pub per_domain_dsc: Vec<BTreeMap<Domain, f64>>,
    /// Mean over domains of each round.
    pub per_round_avg: Vec<f64>,
    /// Mean of the round averages.
    pub overall_avg: f64,
    /// Round-1 average minus the overall average; positive means the
    /// method got worse over the rounds.
    pub pd: f64,
    pub samples: usize,
    /// Set when the stream stopped early.
    pub partial: Option<String>,
    /// SHA-256 of the network weights the run used.
    pub model_digest: String,
    pub config: RunConfig,
}

impl Summary {
    pub fn from_records(cfg: &RunConfig, records: &[AdaptationRecord], model_digest: String) -> Self {
        let last_round = records.iter().map(|r| r.round).max().unwrap_or(0);
        let per_domain_dsc: Vec<BTreeMap<Domain, f64>> = (1..=last_round)
            .map(|round| domain_means(records, round).into_iter().map(|(d, v)| (d, 100.0 * v)).collect())
            .collect();
        let per_round_avg: Vec<f64> = per_domain_dsc
            .iter()
            .map(|m| m.values().sum::<f64>() / m.len().max(1) as f64)
            .collect();
        // Written as an offset from round 1 so identical rounds give PD = 0 exactly.
        let (overall_avg, pd) = match per_round_avg.first() {
            Some(&first) => {
                let drift = per_round_avg.iter().map(|r| r - first).sum::<f64>() / per_round_avg.len() as f64;
                (first + drift, 0.0 - drift)
            }
            None => (0.0, 0.0),
        };
        Self {
            method: cfg.method,
            per_domain_dsc,
            per_round_avg,
            overall_avg,
            pd,
            samples: records.len(),
            partial: None,
            model_digest,
            config: cfg.clone(),
        }
    }

    /// Mean over domains and rounds, i.e. the overall average.
    pub fn mean_dsc(&self) -> f64 {
        self.overall_avg
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("summary serializes");
        s.push('\n');
        s
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Format(format!("summary: {e}")))
    }

    pub fn domains(&self) -> Vec<Domain> {
        let mut all: Vec<Domain> = self.per_domain_dsc.iter().flat_map(|m| m.keys().copied()).collect();
        all.sort();
        all.dedup();
        all
    }
}

/// Writes `summary.json`, `records.jsonl` and the effective `config.toml`.
pub fn write_run(dir: &Path, summary: &Summary, records: &[AdaptationRecord]) -> Result<()> {
    fs::create_dir_all(dir)?;
    fs::write(dir.join(SUMMARY_FILE), summary.to_json())?;
    let mut lines = String::new();
    for r in records {
        lines.push_str(&serde_json::to_string(r).map_err(|e| Error::Format(e.to_string()))?);
        lines.push('\n');
    }
    fs::write(dir.join(RECORDS_FILE), lines)?;
    fs::write(dir.join(CONFIG_FILE), summary.config.to_toml())?;
    Ok(())
}

pub fn read_summary(dir: &Path) -> Result<Summary> {
    let path = dir.join(SUMMARY_FILE);
    let text = fs::read_to_string(&path).map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    Summary::from_json(&text)
}

pub fn read_records(dir: &Path) -> Result<Vec<AdaptationRecord>> {
    let path = dir.join(RECORDS_FILE);
    let text = fs::read_to_string(&path).map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(|e| Error::Format(format!("record: {e}"))))
        .collect()
}

fn fmt_dsc(v: f64) -> String {
    format!("{v:.4}")
}

/// One row per (report, round, domain).
pub fn render_csv(reports: &[(String, Summary)]) -> String {
    let mut out = String::from("report,method,round,domain,dsc\n");
    for (name, s) in reports {
        for (i, round) in s.per_domain_dsc.iter().enumerate() {
            for (d, v) in round {
                let _ = writeln!(out, "{name},{},{},{d},{}", s.method, i + 1, fmt_dsc(*v));
            }
        }
    }
    out
}

/// Per-domain table, per-round table and, for several reports, a grid with
/// one row per report.
pub fn render_md(reports: &[(String, Summary)]) -> String {
    let mut out = String::new();
    out.push_str("| report | method | round | domain | dsc |\n|---|---|---|---|---|\n");
    for (name, s) in reports {
        for (i, round) in s.per_domain_dsc.iter().enumerate() {
            for (d, v) in round {
                let _ = writeln!(out, "| {name} | {} | {} | {d} | {} |", s.method, i + 1, fmt_dsc(*v));
            }
        }
    }
    out.push_str("\n| report | round | average |\n|---|---|---|\n");
    for (name, s) in reports {
        for (i, v) in s.per_round_avg.iter().enumerate() {
            let _ = writeln!(out, "| {name} | {} | {} |", i + 1, fmt_dsc(*v));
        }
    }
    if reports.len() > 1 {
        let mut domains: Vec<Domain> = reports.iter().flat_map(|(_, s)| s.domains()).collect();
        domains.sort();
        domains.dedup();
        out.push_str("\n| report | method |");
        for d in &domains {
            let _ = write!(out, " {d} |");
        }
        out.push_str(" overall | pd |\n|---|---|");
        out.push_str(&"---|".repeat(domains.len() + 2));
        out.push('\n');
        for (name, s) in reports {
            let _ = write!(out, "| {name} | {} |", s.method);
            for d in &domains {
                let v = s.per_domain_dsc.first().and_then(|m| m.get(d));
                let _ = write!(out, " {} |", v.map_or("-".to_string(), |v| fmt_dsc(*v)));
            }
            let _ = writeln!(out, " {} | {} |", fmt_dsc(s.overall_avg), fmt_dsc(s.pd));
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn record(domain: Domain, round: usize, dsc: f64) -> AdaptationRecord {
        AdaptationRecord {
            sample_id: "000001".into(),
            domain,
            round,
            position: 0,
            branches: Vec::new(),
            dsc: vec![dsc, dsc],
            dsc_mean: dsc,
            best_instance_scale: None,
            consistency_trace: Vec::new(),
            failed_branches: Vec::new(),
            wall_time_ms: 0.0,
        }
    }

    #[test]
    fn round_averages_and_pd() {
        let recs = vec![
            record(Domain::B, 1, 0.8),
            record(Domain::C, 1, 0.6),
            record(Domain::B, 2, 0.7),
            record(Domain::C, 2, 0.5),
            record(Domain::B, 3, 0.6),
            record(Domain::C, 3, 0.4),
        ];
        let s = Summary::from_records(&RunConfig::default(), &recs, "d".into());
        assert!((s.per_round_avg[0] - 70.0).abs() < 1e-9);
        assert!((s.per_round_avg[2] - 50.0).abs() < 1e-9);
        assert!((s.overall_avg - 60.0).abs() < 1e-9);
        // Positive PD: the method degraded over the rounds.
        assert!((s.pd - 10.0).abs() < 1e-9);
        assert!((s.per_domain_dsc[1][&Domain::C] - 50.0).abs() < 1e-9);
    }

    #[test]
    fn identical_rounds_give_exact_zero() {
        let recs: Vec<_> = (1..=3).map(|r| record(Domain::B, r, 0.7123456789)).collect();
        let s = Summary::from_records(&RunConfig::default(), &recs, "d".into());
        assert_eq!(s.pd, 0.0);
        assert_eq!(s.overall_avg, s.per_round_avg[0]);
    }

    #[test]
    fn files_and_tables() {
        let recs = vec![record(Domain::B, 1, 0.8), record(Domain::E, 1, 0.5)];
        let s = Summary::from_records(&RunConfig::default(), &recs, "d".into());
        let dir = tempfile::tempdir().unwrap();
        write_run(dir.path(), &s, &recs).unwrap();
        assert_eq!(read_summary(dir.path()).unwrap(), s);
        assert_eq!(read_records(dir.path()).unwrap(), recs);
        let echoed = fs::read_to_string(dir.path().join(CONFIG_FILE)).unwrap();
        assert_eq!(RunConfig::from_toml(&echoed).unwrap(), s.config);
        assert!(matches!(read_summary(&dir.path().join("nope")), Err(Error::Data(_))));

        let reports = vec![("a".to_string(), s.clone()), ("b".to_string(), s)];
        let csv = render_csv(&reports);
        assert_eq!(csv.lines().count(), 1 + 2 * 2);
        let md = render_md(&reports);
        let csv_values: Vec<&str> = csv.lines().skip(1).map(|l| l.rsplit(',').next().unwrap()).collect();
        for v in csv_values {
            assert!(md.contains(&format!("| {v} |")));
        }
        assert!(md.contains("| overall | pd |"));
    }
}
