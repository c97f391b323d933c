use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::{MeanStd, MetricsRow};
use crate::runner::config::Arm;
use crate::runner::train::RunManifest;

/// Mean ± sample standard deviation of each metric for one (arm, detector) pair.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub arm: Arm,
    pub detector: String,
    pub runs: usize,
    pub auroc_mean: f64,
    pub auroc_std: f64,
    pub aupr_mean: f64,
    pub aupr_std: f64,
    pub id_accuracy_mean: f64,
    pub id_accuracy_std: f64,
}

impl ReportRow {
    pub fn method(&self) -> String {
        format!("{}-{}", self.arm.name(), self.detector)
    }
}

pub const REPORT_HEADER: &str =
    "arm,detector,runs,auroc_mean,auroc_std,aupr_mean,aupr_std,id_accuracy_mean,id_accuracy_std";

/// Groups metric rows by arm and detector; rows come out sorted by (arm, detector).
pub fn summarize(manifests: &[&RunManifest]) -> Result<Vec<ReportRow>> {
    if manifests.is_empty() {
        return Err(Error::Contract("report needs at least one manifest".into()));
    }
    let mut groups: BTreeMap<(Arm, String), Vec<&MetricsRow>> = BTreeMap::new();
    for m in manifests {
        for row in &m.metrics {
            groups
                .entry((m.arm, row.detector.clone()))
                .or_default()
                .push(row);
        }
    }
    Ok(groups
        .into_iter()
        .map(|((arm, detector), rows)| {
            let col = |f: fn(&MetricsRow) -> f64| {
                MeanStd::of(&rows.iter().map(|r| f(r)).collect::<Vec<_>>())
            };
            let (a, p, c) = (col(|r| r.auroc), col(|r| r.aupr), col(|r| r.id_accuracy));
            ReportRow {
                arm,
                detector,
                runs: rows.len(),
                auroc_mean: a.mean,
                auroc_std: a.std,
                aupr_mean: p.mean,
                aupr_std: p.std,
                id_accuracy_mean: c.mean,
                id_accuracy_std: c.std,
            }
        })
        .collect())
}

pub fn write_report_csv<W: std::io::Write>(w: W, rows: &[ReportRow]) -> Result<()> {
    let mut out = csv::WriterBuilder::new().has_headers(false).from_writer(w);
    out.write_record(REPORT_HEADER.split(','))?;
    for row in rows {
        out.serialize(row)?;
    }
    out.flush().map_err(|e| Error::io("writing report csv", e))
}

pub fn read_report_csv<R: std::io::Read>(r: R) -> Result<Vec<ReportRow>> {
    let mut rdr = csv::Reader::from_reader(r);
    rdr.deserialize().map(|r| r.map_err(Error::from)).collect()
}

/// Aligned text table in percent; `*` marks the best mean of each column.
pub fn render_text(rows: &[ReportRow]) -> String {
    let best = |f: fn(&ReportRow) -> f64| rows.iter().map(f).fold(f64::NEG_INFINITY, f64::max);
    let (ba, bp, bc) = (
        best(|r| r.auroc_mean),
        best(|r| r.aupr_mean),
        best(|r| r.id_accuracy_mean),
    );
    let cell = |mean: f64, std: f64, top: f64| {
        format!(
            "{:6.2} ± {:5.2}{}",
            100.0 * mean,
            100.0 * std,
            if mean == top { "*" } else { " " }
        )
    };
    let width = rows
        .iter()
        .map(|r| r.method().len())
        .max()
        .unwrap_or(6)
        .max(6);
    let mut s = String::new();
    let _ = writeln!(
        s,
        "{:<width$}  {:>4}  {:<16}  {:<16}  {:<16}",
        "method", "runs", "AUROC", "AUPR", "ID accuracy"
    );
    for r in rows {
        let _ = writeln!(
            s,
            "{:<width$}  {:>4}  {}  {}  {}",
            r.method(),
            r.runs,
            cell(r.auroc_mean, r.auroc_std, ba),
            cell(r.aupr_mean, r.aupr_std, bp),
            cell(r.id_accuracy_mean, r.id_accuracy_std, bc)
        );
    }
    s.push_str(
        "± is the sample standard deviation across runs; * marks the best mean per column.\n",
    );
    s
}
