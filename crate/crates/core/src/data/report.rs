//! CSV and JSON run reports. Output is byte-deterministic: fixed column
//! order, fixed six-decimal numbers, no timestamps.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{AefError, Result};
use crate::metrics::{mean_std, ModelSummary};
use crate::optim::{HyperParams, RunTrace};

pub const CSV_COLUMNS: [&str; 9] = [
    "run_id",
    "model",
    "iteration",
    "l2mask",
    "srmask_pct",
    "psnr_db",
    "ssim",
    "weight",
    "l_ema",
];

/// Model name of the cross-model summary row.
pub const AGGREGATE: &str = "aggregate";

/// One report line. Empty fields are `None`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub run_id: String,
    pub model: String,
    pub iteration: Option<usize>,
    pub l2mask: Option<f64>,
    pub srmask_pct: Option<f64>,
    pub psnr_db: Option<f64>,
    pub ssim: Option<f64>,
    pub weight: Option<f64>,
    pub l_ema: Option<f64>,
}

impl ReportRow {
    fn empty(run_id: &str, model: &str) -> Self {
        ReportRow {
            run_id: run_id.into(),
            model: model.into(),
            iteration: None,
            l2mask: None,
            srmask_pct: None,
            psnr_db: None,
            ssim: None,
            weight: None,
            l_ema: None,
        }
    }
}

/// A JSON report: rows plus the resolved hyperparameters and free-form details.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub run_id: String,
    pub hyper_params: HyperParams,
    pub rows: Vec<ReportRow>,
    #[serde(default)]
    pub details: BTreeMap<String, serde_json::Value>,
}

/// One row per model with its final weight and smoothed loss, then an
/// aggregate row holding the cross-model means (SRmask std-dev goes in
/// `Report::details`).
pub fn summary_rows(run_id: &str, summaries: &[ModelSummary], trace: Option<&RunTrace>) -> Result<Vec<ReportRow>> {
    if summaries.is_empty() {
        return Err(AefError::InvalidArgument("report has no models".into()));
    }
    let last = trace.and_then(|t| t.rows.last());
    let mut rows: Vec<ReportRow> = summaries
        .iter()
        .enumerate()
        .map(|(i, s)| ReportRow {
            l2mask: Some(s.l2mask),
            srmask_pct: Some(s.srmask_pct),
            psnr_db: Some(s.psnr_db),
            ssim: Some(s.ssim),
            weight: last.and_then(|r| r.weights.get(i).copied()),
            l_ema: last.and_then(|r| r.l_ema.get(i).copied()),
            ..ReportRow::empty(run_id, &s.model)
        })
        .collect();
    let mean = |f: fn(&ModelSummary) -> f64| mean_std(&summaries.iter().map(f).collect::<Vec<_>>()).0;
    rows.push(ReportRow {
        l2mask: Some(mean(|s| s.l2mask)),
        srmask_pct: Some(mean(|s| s.srmask_pct)),
        psnr_db: Some(mean(|s| s.psnr_db)),
        ssim: Some(mean(|s| s.ssim)),
        ..ReportRow::empty(run_id, AGGREGATE)
    });
    Ok(rows)
}

/// Weight and smoothed loss of every model at every Stage-2 step.
pub fn trace_rows(run_id: &str, trace: &RunTrace) -> Vec<ReportRow> {
    trace
        .rows
        .iter()
        .flat_map(|r| {
            trace.models.iter().enumerate().map(move |(i, m)| ReportRow {
                iteration: Some(r.iteration),
                weight: Some(r.weights[i]),
                l_ema: Some(r.l_ema[i]),
                ..ReportRow::empty(run_id, m)
            })
        })
        .collect()
}

fn fixed(v: Option<f64>) -> String {
    v.map(|v| format!("{v:.6}")).unwrap_or_default()
}

pub fn write_csv(rows: &[ReportRow], path: &Path) -> Result<()> {
    let csv_err = |e: csv::Error| AefError::io(format!("writing {}", path.display()), e.into());
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    w.write_record(CSV_COLUMNS).map_err(csv_err)?;
    for r in rows {
        w.write_record([
            r.run_id.clone(),
            r.model.clone(),
            r.iteration.map(|i| i.to_string()).unwrap_or_default(),
            fixed(r.l2mask),
            fixed(r.srmask_pct),
            fixed(r.psnr_db),
            fixed(r.ssim),
            fixed(r.weight),
            fixed(r.l_ema),
        ])
        .map_err(csv_err)?;
    }
    w.flush().map_err(|e| AefError::io(format!("writing {}", path.display()), e))
}

pub fn write_json<T: Serialize>(value: &T, path: &Path) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)
        .map_err(|e| AefError::InvalidArgument(format!("serializing {}: {e}", path.display())))?;
    text.push('\n');
    std::fs::write(path, text).map_err(|e| AefError::io(format!("writing {}", path.display()), e))
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| AefError::io(format!("reading {}", path.display()), e))?;
    serde_json::from_str(&text).map_err(|e| AefError::Format {
        path: path.to_path_buf(),
        offset: 0,
        msg: e.to_string(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn summaries() -> Vec<ModelSummary> {
        (0..4)
            .map(|i| ModelSummary {
                model: format!("m{i}"),
                l2mask: 0.1 * i as f64,
                srmask_pct: 25.0 * i as f64,
                psnr_db: 20.0,
                ssim: 0.5,
            })
            .collect()
    }

    #[test]
    fn summary_has_one_row_per_model_plus_aggregate() {
        let rows = summary_rows("r", &summaries(), None).unwrap();
        assert_eq!(rows.len(), 5);
        assert_eq!(rows[4].model, AGGREGATE);
        assert_eq!(rows[4].srmask_pct, Some(37.5));
    }

    #[test]
    fn csv_uses_fixed_columns_and_decimals() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("r.csv");
        write_csv(&summary_rows("r", &summaries(), None).unwrap(), &path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next().unwrap(), CSV_COLUMNS.join(","));
        assert_eq!(lines.next().unwrap(), "r,m0,,0.000000,0.000000,20.000000,0.500000,,");
        let first = std::fs::read(&path).unwrap();
        write_csv(&summary_rows("r", &summaries(), None).unwrap(), &path).unwrap();
        assert_eq!(first, std::fs::read(&path).unwrap());
    }

    #[test]
    fn json_echo_roundtrips_hyper_params() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("r.json");
        let hp = HyperParams {
            temperature: 0.37,
            eta: Some(0.004),
            ..HyperParams::default()
        };
        let report = Report {
            run_id: "r".into(),
            hyper_params: hp.clone(),
            rows: summary_rows("r", &summaries(), None).unwrap(),
            details: BTreeMap::new(),
        };
        write_json(&report, &path).unwrap();
        let back: Report = read_json(&path).unwrap();
        assert_eq!(back.hyper_params, hp);
        assert_eq!(back, report);
    }

    #[test]
    fn unwritable_path_is_an_error() {
        let rows = summary_rows("r", &summaries(), None).unwrap();
        assert!(write_csv(&rows, Path::new("/nonexistent/dir/r.csv")).is_err());
    }
}
