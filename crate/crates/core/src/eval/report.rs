use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Metrics of one (mode, method) cell of the benchmark grid.
///
/// `None` marks a metric that is undefined (e.g. NLL of a deterministic
/// detector) or a grid cell whose artifacts are missing.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub mode: String,
    pub uq_method: String,
    pub ap50: Option<f64>,
    pub ap70: Option<f64>,
    pub nll50: Option<f64>,
    pub nll70: Option<f64>,
    pub n_det: Option<u64>,
    pub n_gt: Option<u64>,
    pub seconds: Option<f64>,
}

impl ReportRow {
    pub fn missing(mode: &str, uq_method: &str) -> Self {
        Self {
            mode: mode.into(),
            uq_method: uq_method.into(),
            ap50: None,
            ap70: None,
            nll50: None,
            nll70: None,
            n_det: None,
            n_gt: None,
            seconds: None,
        }
    }

    pub fn is_missing(&self) -> bool {
        self.ap50.is_none() && self.n_gt.is_none()
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct MetricReport {
    /// Free-form header lines printed above the table.
    pub notes: Vec<String>,
    pub rows: Vec<ReportRow>,
}

impl MetricReport {
    pub fn row(&self, mode: &str, uq_method: &str) -> Option<&ReportRow> {
        self.rows.iter().find(|r| r.mode == mode && r.uq_method == uq_method)
    }

    /// Fixed-width table for reading.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for n in &self.notes {
            writeln!(s, "# {n}").expect("write to string");
        }
        writeln!(
            s,
            "{:<6} {:<8} {:>7} {:>7} {:>9} {:>9} {:>6} {:>6} {:>8}",
            "mode", "method", "AP@0.5", "AP@0.7", "NLL@0.5", "NLL@0.7", "n_det", "n_gt", "seconds"
        )
        .expect("write to string");
        let f = |v: Option<f64>, p: usize| v.map_or("-".to_string(), |x| format!("{x:.p$}"));
        let u = |v: Option<u64>| v.map_or("-".to_string(), |x| x.to_string());
        for r in &self.rows {
            if r.is_missing() {
                writeln!(s, "{:<6} {:<8} missing artifacts", r.mode, r.uq_method).expect("write to string");
                continue;
            }
            writeln!(
                s,
                "{:<6} {:<8} {:>7} {:>7} {:>9} {:>9} {:>6} {:>6} {:>8}",
                r.mode,
                r.uq_method,
                f(r.ap50, 4),
                f(r.ap70, 4),
                f(r.nll50, 4),
                f(r.nll70, 4),
                u(r.n_det),
                u(r.n_gt),
                f(r.seconds, 2)
            )
            .expect("write to string");
        }
        s
    }

    /// One JSON object per row.
    pub fn to_jsonl(&self) -> String {
        self.rows.iter().map(|r| serde_json::to_string(r).expect("row serializes") + "\n").collect()
    }

    pub fn from_jsonl(text: &str) -> Result<Self> {
        let rows = text
            .lines()
            .filter(|l| !l.trim().is_empty())
            .map(|l| serde_json::from_str(l).map_err(|e| Error::Format(format!("report record: {e}"))))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { notes: vec![], rows })
    }
}
