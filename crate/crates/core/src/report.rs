//! Report rows, their CSV/JSON forms, and plot-ready curve files.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const CSV_HEADER: &str = "model,channel,psnr_db,budget,seed,accuracy,avg_tx_flops,exit_hist,tx_dim";

/// Written in the accuracy column of rows whose budget could not be met.
pub const INFEASIBLE: &str = "infeasible";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RowStatus {
    Ok,
    Infeasible,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub model: String,
    pub channel: String,
    /// Absent for the noiseless channel.
    pub psnr_db: Option<f64>,
    /// Total transmitter budget for the test batch; absent for fixed-exit rows.
    pub budget: Option<f64>,
    pub seed: u64,
    pub status: RowStatus,
    pub accuracy: Option<f64>,
    pub avg_tx_flops: Option<f64>,
    pub exit_hist: Vec<usize>,
    pub tx_dim: usize,
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

fn parse_opt(field: &str, what: &str, line: usize) -> Result<Option<f64>> {
    if field.is_empty() {
        return Ok(None);
    }
    field
        .parse()
        .map(Some)
        .map_err(|_| Error::Config(format!("line {line}: bad {what} `{field}`")))
}

impl ReportRow {
    fn csv_fields(&self) -> [String; 9] {
        let accuracy = match self.status {
            RowStatus::Infeasible => INFEASIBLE.to_string(),
            RowStatus::Ok => opt(self.accuracy),
        };
        let hist: Vec<String> = self.exit_hist.iter().map(|c| c.to_string()).collect();
        [
            self.model.clone(),
            self.channel.clone(),
            opt(self.psnr_db),
            opt(self.budget),
            self.seed.to_string(),
            accuracy,
            opt(self.avg_tx_flops),
            hist.join("|"),
            self.tx_dim.to_string(),
        ]
    }

    fn from_csv_fields(r: &csv::StringRecord, line: usize) -> Result<Self> {
        if r.len() != 9 {
            return Err(Error::Config(format!("line {line}: expected 9 fields, got {}", r.len())));
        }
        let bad = |what: &str, v: &str| Error::Config(format!("line {line}: bad {what} `{v}`"));
        let (status, accuracy) = if &r[5] == INFEASIBLE {
            (RowStatus::Infeasible, None)
        } else {
            (RowStatus::Ok, parse_opt(&r[5], "accuracy", line)?)
        };
        let exit_hist = if r[7].is_empty() {
            Vec::new()
        } else {
            r[7].split('|')
                .map(|c| c.parse().map_err(|_| bad("exit_hist", &r[7])))
                .collect::<Result<_>>()?
        };
        Ok(Self {
            model: r[0].to_string(),
            channel: r[1].to_string(),
            psnr_db: parse_opt(&r[2], "psnr_db", line)?,
            budget: parse_opt(&r[3], "budget", line)?,
            seed: r[4].parse().map_err(|_| bad("seed", &r[4]))?,
            status,
            accuracy,
            avg_tx_flops: parse_opt(&r[6], "avg_tx_flops", line)?,
            exit_hist,
            tx_dim: r[8].parse().map_err(|_| bad("tx_dim", &r[8]))?,
        })
    }
}

pub fn rows_to_csv(rows: &[ReportRow]) -> Result<String> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(Vec::new());
    w.write_record(CSV_HEADER.split(','))?;
    for r in rows {
        w.write_record(r.csv_fields())?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Config(e.to_string()))?;
    String::from_utf8(bytes).map_err(|e| Error::Config(e.to_string()))
}

pub fn rows_from_csv(text: &str) -> Result<Vec<ReportRow>> {
    let mut rd = csv::ReaderBuilder::new().has_headers(true).from_reader(text.as_bytes());
    let header: Vec<String> = rd.headers()?.iter().map(String::from).collect();
    if header.join(",") != CSV_HEADER {
        return Err(Error::Config(format!("unexpected report header `{}`", header.join(","))));
    }
    rd.records()
        .enumerate()
        .map(|(i, r)| ReportRow::from_csv_fields(&r?, i + 2))
        .collect()
}

fn write_file(path: &Path, contents: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::write(path, contents).map_err(|e| Error::io(path, e))
}

/// Writes `report.csv` and `report.json` into `dir`.
pub fn emit_report(rows: &[ReportRow], dir: &Path) -> Result<()> {
    if rows.is_empty() {
        return Err(Error::Config("a report needs at least one row".into()));
    }
    write_file(&dir.join("report.csv"), &rows_to_csv(rows)?)?;
    write_file(&dir.join("report.json"), &(serde_json::to_string_pretty(rows)? + "\n"))
}

/// Two-column CSV of `(x, y)` pairs.
pub fn curve_csv(x: &str, y: &str, points: &[(f64, f64)]) -> String {
    let mut s = format!("{x},{y}\n");
    for (a, b) in points {
        let _ = writeln!(s, "{a},{b}");
    }
    s
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// Mean accuracy over seeds against budget, one curve per model and channel.
pub fn budget_curves(rows: &[ReportRow]) -> BTreeMap<String, Vec<(f64, f64)>> {
    let mut groups: BTreeMap<String, BTreeMap<u64, Vec<f64>>> = BTreeMap::new();
    for r in rows {
        if let (Some(b), Some(a)) = (r.budget, r.accuracy) {
            groups
                .entry(format!("{}_{}", r.model, channel_tag(r)))
                .or_default()
                .entry(b.to_bits())
                .or_default()
                .push(a);
        }
    }
    groups
        .into_iter()
        .map(|(k, by)| {
            let mut pts: Vec<(f64, f64)> = by.into_iter().map(|(b, a)| (f64::from_bits(b), mean(&a))).collect();
            pts.sort_by(|x, y| x.0.total_cmp(&y.0));
            (k, pts)
        })
        .collect()
}

/// Mean fixed-exit accuracy over seeds against PSNR, one curve per model and channel kind.
pub fn psnr_curves(rows: &[ReportRow]) -> BTreeMap<String, Vec<(f64, f64)>> {
    let mut groups: BTreeMap<String, BTreeMap<u64, Vec<f64>>> = BTreeMap::new();
    for r in rows {
        if let (None, Some(p), Some(a)) = (r.budget, r.psnr_db, r.accuracy) {
            groups
                .entry(format!("{}_{}", r.model, r.channel))
                .or_default()
                .entry(p.to_bits())
                .or_default()
                .push(a);
        }
    }
    groups
        .into_iter()
        .map(|(k, by)| {
            let mut pts: Vec<(f64, f64)> = by.into_iter().map(|(p, a)| (f64::from_bits(p), mean(&a))).collect();
            pts.sort_by(|x, y| x.0.total_cmp(&y.0));
            (k, pts)
        })
        .collect()
}

/// File-name friendly channel tag such as `awgn_12dB`.
pub fn channel_tag(r: &ReportRow) -> String {
    match r.psnr_db {
        Some(p) => format!("{}_{}dB", r.channel, p),
        None => r.channel.clone(),
    }
}

/// Writes the accuracy-vs-budget and accuracy-vs-PSNR curves into `dir`.
pub fn emit_curves(rows: &[ReportRow], dir: &Path) -> Result<()> {
    for (name, pts) in budget_curves(rows) {
        write_file(&dir.join(format!("curve_budget_{name}.csv")), &curve_csv("budget", "accuracy", &pts))?;
    }
    for (name, pts) in psnr_curves(rows) {
        if pts.len() > 1 {
            write_file(&dir.join(format!("curve_psnr_{name}.csv")), &curve_csv("psnr_db", "accuracy", &pts))?;
        }
    }
    Ok(())
}

pub fn write_text(path: &Path, contents: &str) -> Result<()> {
    write_file(path, contents)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn row() -> ReportRow {
        ReportRow {
            model: "dynamic-desk".into(),
            channel: "awgn".into(),
            psnr_db: Some(12.0),
            budget: Some(1.5e9),
            seed: 3,
            status: RowStatus::Ok,
            accuracy: Some(0.8125),
            avg_tx_flops: Some(1_499_321.25),
            exit_hist: vec![10, 20, 30],
            tx_dim: 16,
        }
    }

    #[test]
    fn one_row_two_lines() {
        let csv = rows_to_csv(&[row()]).unwrap();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines.len(), 2);
        assert_eq!(lines[0], CSV_HEADER);
        assert_eq!(lines[1], "dynamic-desk,awgn,12,1500000000,3,0.8125,1499321.25,10|20|30,16");
    }

    #[test]
    fn static_row_has_null_budget() {
        let r = ReportRow {
            budget: None,
            exit_hist: vec![100],
            ..row()
        };
        assert_eq!(rows_to_csv(&[r]).unwrap().lines().nth(1).unwrap(), "dynamic-desk,awgn,12,,3,0.8125,1499321.25,100,16");
    }

    #[test]
    fn infeasible_rows_round_trip() {
        let r = ReportRow {
            status: RowStatus::Infeasible,
            accuracy: None,
            avg_tx_flops: None,
            exit_hist: Vec::new(),
            ..row()
        };
        let csv = rows_to_csv(&[r.clone()]).unwrap();
        assert!(csv.contains(",infeasible,,,16"));
        assert_eq!(rows_from_csv(&csv).unwrap(), vec![r]);
    }

    #[test]
    fn rejects_foreign_header() {
        assert!(rows_from_csv("a,b\n1,2\n").is_err());
        assert!(emit_report(&[], Path::new("/nonexistent")).is_err());
    }

    #[test]
    fn curves_average_seeds() {
        let mut a = row();
        let mut b = row();
        b.seed = 4;
        b.accuracy = Some(0.6875);
        a.budget = Some(1.0);
        b.budget = Some(1.0);
        let c = budget_curves(&[a, b]);
        assert_eq!(c["dynamic-desk_awgn_12dB"], vec![(1.0, 0.75)]);
        assert_eq!(curve_csv("budget", "accuracy", &[(1.0, 0.75)]), "budget,accuracy\n1,0.75\n");
    }

    fn arb_row() -> impl Strategy<Value = ReportRow> {
        (
            "[a-z][a-z0-9-]{0,8}",
            prop::option::of(-20.0f64..40.0),
            prop::option::of(0.0f64..1e12),
            any::<u64>(),
            prop::option::of(0.0f64..=1.0),
            prop::collection::vec(0usize..10_000, 0..6),
            any::<bool>(),
        )
            .prop_map(|(model, psnr, budget, seed, acc, hist, infeasible)| ReportRow {
                model,
                channel: "rayleigh".into(),
                psnr_db: psnr,
                budget,
                seed,
                status: if infeasible { RowStatus::Infeasible } else { RowStatus::Ok },
                accuracy: if infeasible { None } else { acc },
                avg_tx_flops: if infeasible { None } else { acc.map(|a| a * 1e6) },
                exit_hist: hist,
                tx_dim: 16,
            })
    }

    proptest! {
        #[test]
        fn csv_round_trip(rows in prop::collection::vec(arb_row(), 1..8)) {
            let csv = rows_to_csv(&rows).unwrap();
            prop_assert_eq!(rows_from_csv(&csv).unwrap(), rows.clone());
            let json = serde_json::to_string(&rows).unwrap();
            prop_assert_eq!(serde_json::from_str::<Vec<ReportRow>>(&json).unwrap(), rows);
        }
    }
}
