//! Trace and sweep-summary files.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::RunResult;
use crate::diagnostics::{DiagnosticsRecord, TRACE_HEADER};
use crate::{Error, Result};

pub const SUMMARY_HEADER: &str =
    "sweep_value,median_best_return,median_max_regression_error,median_max_vame,median_lip_bound";

/// Per-value medians over seeds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepSummaryRow {
    pub sweep_value: String,
    pub median_best_return: f64,
    pub median_max_regression_error: f64,
    pub median_max_vame: f64,
    pub median_lip_bound: f64,
}

impl SweepSummaryRow {
    fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{}",
            self.sweep_value,
            self.median_best_return,
            self.median_max_regression_error,
            self.median_max_vame,
            self.median_lip_bound
        )
    }
}

/// Median; the mean of the two middle values for even lengths. `None` when
/// empty.
pub fn median(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    Some(if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    })
}

fn ranks(x: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..x.len()).collect();
    idx.sort_by(|&a, &b| x[a].total_cmp(&x[b]));
    let mut r = vec![0.0; x.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && x[idx[j + 1]] == x[idx[i]] {
            j += 1;
        }
        // ties share the average rank
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            r[k] = avg;
        }
        i = j + 1;
    }
    r
}

/// Spearman rank correlation with average ranks for ties. `None` for
/// fewer than two points, mismatched lengths, or a constant input.
pub fn spearman(x: &[f64], y: &[f64]) -> Option<f64> {
    if x.len() != y.len() || x.len() < 2 {
        return None;
    }
    let (rx, ry) = (ranks(x), ranks(y));
    let n = x.len() as f64;
    let mx = rx.iter().sum::<f64>() / n;
    let my = ry.iter().sum::<f64>() / n;
    let mut sxy = 0.0;
    let mut sxx = 0.0;
    let mut syy = 0.0;
    for (a, b) in rx.iter().zip(&ry) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        return None;
    }
    Some(sxy / (sxx * syy).sqrt())
}

/// Group results by sweep value (first-appearance order) and take medians
/// over seeds. Results without a sweep value are grouped under `none`.
pub fn summarize_sweep(results: &[RunResult]) -> Vec<SweepSummaryRow> {
    let mut order: Vec<String> = Vec::new();
    for r in results {
        let v = r.sweep_value.clone().unwrap_or_else(|| "none".into());
        if !order.contains(&v) {
            order.push(v);
        }
    }
    order
        .into_iter()
        .map(|value| {
            let group: Vec<&RunResult> = results
                .iter()
                .filter(|r| r.sweep_value.as_deref().unwrap_or("none") == value)
                .collect();
            let med = |f: fn(&RunResult) -> f64| {
                median(&group.iter().map(|r| f(r)).collect::<Vec<_>>()).unwrap_or(0.0)
            };
            SweepSummaryRow {
                sweep_value: value,
                median_best_return: med(|r| r.summary.best_return),
                median_max_regression_error: med(|r| r.summary.max_regression_error),
                median_max_vame: med(|r| r.summary.max_vame),
                median_lip_bound: med(|r| r.summary.final_lip_bound),
            }
        })
        .collect()
}

pub fn write_trace_csv(path: &Path, trace: &[DiagnosticsRecord]) -> Result<()> {
    let mut s = String::with_capacity(64 * (trace.len() + 1));
    s.push_str(TRACE_HEADER);
    s.push('\n');
    for r in trace {
        s.push_str(&r.csv_row());
        s.push('\n');
    }
    std::fs::write(path, s).map_err(|e| Error::io(path, e))
}

pub fn read_trace_csv(path: &Path) -> Result<Vec<DiagnosticsRecord>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut lines = text.lines();
    if lines.next() != Some(TRACE_HEADER) {
        return Err(Error::Format {
            what: "trace csv",
            detail: "header mismatch".into(),
        });
    }
    lines
        .filter(|l| !l.trim().is_empty())
        .map(DiagnosticsRecord::parse_csv_row)
        .collect()
}

pub fn read_summary_csv(path: &Path) -> Result<Vec<SweepSummaryRow>> {
    let bad = |detail: String| Error::Format {
        what: "summary csv",
        detail,
    };
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut lines = text.lines();
    if lines.next() != Some(SUMMARY_HEADER) {
        return Err(bad("header mismatch".into()));
    }
    lines
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            let f: Vec<&str> = l.split(',').collect();
            if f.len() != 5 {
                return Err(bad(format!("expected 5 fields, got {}", f.len())));
            }
            let num = |i: usize| f[i].parse::<f64>().map_err(|e| bad(format!("field {i}: {e}")));
            Ok(SweepSummaryRow {
                sweep_value: f[0].to_string(),
                median_best_return: num(1)?,
                median_max_regression_error: num(2)?,
                median_max_vame: num(3)?,
                median_lip_bound: num(4)?,
            })
        })
        .collect()
}

#[derive(Serialize)]
struct ManifestRun<'a> {
    sweep_value: Option<&'a str>,
    seed: u64,
    dir: PathBuf,
    trace: PathBuf,
    summary: super::RunSummary,
    model_holdout_mse: Option<f64>,
    checkpoints: &'a [PathBuf],
    wall_time_s: f64,
}

/// Write per-run traces (into each run's directory, or `runs/<i>` under
/// `dir` for runs without one), `summary.csv` and `manifest.json`.
pub fn emit_report(results: &[RunResult], dir: &Path) -> Result<Vec<SweepSummaryRow>> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut runs = Vec::with_capacity(results.len());
    for (i, r) in results.iter().enumerate() {
        let run_dir = r
            .out_dir
            .clone()
            .unwrap_or_else(|| dir.join("runs").join(i.to_string()));
        std::fs::create_dir_all(&run_dir).map_err(|e| Error::io(&run_dir, e))?;
        let trace = run_dir.join("trace.csv");
        write_trace_csv(&trace, &r.trace)?;
        runs.push(ManifestRun {
            sweep_value: r.sweep_value.as_deref(),
            seed: r.seed,
            dir: run_dir,
            trace,
            summary: r.summary,
            model_holdout_mse: r.model_holdout_mse,
            checkpoints: &r.checkpoints,
            wall_time_s: r.trace.last().map_or(0.0, |t| t.wall_time_s),
        });
    }
    let rows = summarize_sweep(results);
    let mut csv = String::from(SUMMARY_HEADER);
    csv.push('\n');
    for row in &rows {
        csv.push_str(&row.csv_row());
        csv.push('\n');
    }
    let path = dir.join("summary.csv");
    std::fs::write(&path, csv).map_err(|e| Error::io(&path, e))?;
    let manifest = serde_json::json!({
        "format_version": 1,
        "crate_version": env!("CARGO_PKG_VERSION"),
        "sweep_axis": results.first().and_then(|r| r.config.sweep_axis),
        "config": results.first().map(|r| r.config.to_text()),
        "runs": runs,
        "summary": rows,
    });
    let path = dir.join("manifest.json");
    std::fs::write(&path, serde_json::to_string_pretty(&manifest)?).map_err(|e| Error::io(&path, e))?;
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn median_against_sort() {
        assert_eq!(median(&[]), None);
        assert_eq!(median(&[3.0]), Some(3.0));
        assert_eq!(median(&[5.0, 1.0, 4.0, 2.0, 3.0]), Some(3.0));
        assert_eq!(median(&[4.0, 1.0, 3.0, 2.0]), Some(2.5));
    }

    #[test]
    fn spearman_cases() {
        let x = [1.0, 2.0, 3.0, 4.0, 5.0];
        assert!((spearman(&x, &[2.0, 4.0, 8.0, 16.0, 32.0]).unwrap() - 1.0).abs() < 1e-12);
        assert!((spearman(&x, &[5.0, 3.0, 2.0, 1.0, 0.0]).unwrap() + 1.0).abs() < 1e-12);
        // textbook value: d² = (0,1,1,0,0) → 1 - 6·2/(5·24) = 0.9
        assert!((spearman(&x, &[1.0, 3.0, 2.0, 4.0, 5.0]).unwrap() - 0.9).abs() < 1e-12);
        assert_eq!(spearman(&x, &[1.0; 5]), None);
        assert_eq!(ranks(&[10.0, 20.0, 10.0]), vec![1.5, 3.0, 1.5]);
    }
}
