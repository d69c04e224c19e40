use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::experiment::{mean, ExperimentResult};
use crate::{Error, Result};

pub const RESULTS_FILE: &str = "results.csv";
pub const SUMMARY_FILE: &str = "summary.csv";
pub const PLOT_FILE: &str = "plot_data.csv";

/// One row per (scheme, rule, origin device, seed). Column order is the
/// field order and is part of the file format.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub config_hash: String,
    pub scheme: String,
    pub seed: u64,
    pub rule: String,
    pub origin_device: usize,
    pub cefi_accuracy: f64,
    pub solo_accuracy: f64,
    pub oracle_accuracy: f64,
    pub input_sharing_accuracy: f64,
    pub edge_ensemble_accuracy: Option<f64>,
    pub ce_bytes_per_epoch: u64,
    pub inference_bytes_per_sample: u64,
}

/// Mean ± sample standard deviation over seeds of a per-seed device mean.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub config_hash: String,
    pub scheme: String,
    pub method: String,
    pub mean: f64,
    /// Empty with fewer than two seeds.
    pub std: Option<f64>,
    pub seeds: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlotPoint {
    pub x: String,
    pub y: f64,
    pub series: String,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ReportPaths {
    pub results: PathBuf,
    pub summary: PathBuf,
    pub plot: PathBuf,
}

pub fn hash_hex(hash: u64) -> String {
    format!("{hash:016x}")
}

pub fn result_rows(results: &[ExperimentResult]) -> Vec<ResultRow> {
    let mut rows = Vec::new();
    for r in results {
        for rule in &r.cefi {
            for (origin, &acc) in rule.per_origin.iter().enumerate() {
                rows.push(ResultRow {
                    config_hash: hash_hex(r.config_hash),
                    scheme: r.scheme.name(),
                    seed: r.seed,
                    rule: rule.rule.name().to_string(),
                    origin_device: origin,
                    cefi_accuracy: acc,
                    solo_accuracy: r.solo[origin],
                    oracle_accuracy: r.oracle[origin],
                    input_sharing_accuracy: r.input_sharing,
                    edge_ensemble_accuracy: r.edge_ensemble,
                    ce_bytes_per_epoch: r.comm.ce_bytes_per_epoch,
                    inference_bytes_per_sample: r.comm.inference_bytes_per_sample,
                });
            }
        }
    }
    rows
}

/// `(mean, std)` with the `n − 1` denominator; no std below two values.
pub fn mean_std(values: &[f64]) -> (f64, Option<f64>) {
    let m = mean(values);
    if values.len() < 2 {
        return (m, None);
    }
    let var = values.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (values.len() - 1) as f64;
    (m, Some(var.sqrt()))
}

/// Per scheme and method, statistics over seeds of the device-averaged
/// accuracy. Schemes and methods appear in first-seen order.
pub fn summary_rows(rows: &[ResultRow], run_hash: u64) -> Vec<SummaryRow> {
    // per (scheme, seed): origin-indexed solo / oracle, and per-method origin values
    struct Cell {
        solo: BTreeMap<usize, f64>,
        oracle: BTreeMap<usize, f64>,
        input_sharing: f64,
        edge: Option<f64>,
        rules: Vec<(String, Vec<f64>)>,
    }
    let mut cells: Vec<((String, u64), Cell)> = Vec::new();
    for row in rows {
        let key = (row.scheme.clone(), row.seed);
        let idx = match cells.iter().position(|(k, _)| *k == key) {
            Some(i) => i,
            None => {
                let cell = Cell {
                    solo: BTreeMap::new(),
                    oracle: BTreeMap::new(),
                    input_sharing: row.input_sharing_accuracy,
                    edge: row.edge_ensemble_accuracy,
                    rules: Vec::new(),
                };
                cells.push((key, cell));
                cells.len() - 1
            }
        };
        let cell = &mut cells[idx].1;
        cell.solo.insert(row.origin_device, row.solo_accuracy);
        cell.oracle.insert(row.origin_device, row.oracle_accuracy);
        let method = format!("cefi_{}", row.rule);
        match cell.rules.iter_mut().find(|(m, _)| *m == method) {
            Some((_, v)) => v.push(row.cefi_accuracy),
            None => cell.rules.push((method, vec![row.cefi_accuracy])),
        }
    }

    let mut order: Vec<(String, String)> = Vec::new();
    let mut values: BTreeMap<(String, String), Vec<f64>> = BTreeMap::new();
    let mut push = |scheme: &str, method: &str, v: f64| {
        let key = (scheme.to_string(), method.to_string());
        if !values.contains_key(&key) {
            order.push(key.clone());
        }
        values.entry(key).or_default().push(v);
    };
    for ((scheme, _), cell) in &cells {
        push(scheme, "solo", mean(&cell.solo.values().copied().collect::<Vec<_>>()));
        push(scheme, "input_sharing", cell.input_sharing);
        if let Some(e) = cell.edge {
            push(scheme, "edge_ensemble", e);
        }
        for (method, v) in &cell.rules {
            push(scheme, method, mean(v));
        }
        push(scheme, "cefi_oracle", mean(&cell.oracle.values().copied().collect::<Vec<_>>()));
    }
    order
        .into_iter()
        .map(|key| {
            let v = &values[&key];
            let (mean, std) = mean_std(v);
            SummaryRow { config_hash: hash_hex(run_hash), scheme: key.0, method: key.1, mean, std, seeds: v.len() }
        })
        .collect()
}

pub fn plot_points(summary: &[SummaryRow]) -> Vec<PlotPoint> {
    summary
        .iter()
        .map(|s| PlotPoint { x: s.scheme.clone(), y: s.mean, series: s.method.clone() })
        .collect()
}

fn write_csv<T: Serialize>(path: &Path, rows: &[T], header: &[&str]) -> Result<()> {
    let io = |e: csv::Error| match e.into_kind() {
        csv::ErrorKind::Io(e) => Error::io(path, e),
        other => Error::invalid(format!("csv encoding failed: {other:?}")),
    };
    let mut w = csv::WriterBuilder::new().has_headers(false).from_path(path).map_err(io)?;
    // written by hand so that an empty table still carries its header
    w.write_record(header).map_err(io)?;
    for row in rows {
        w.serialize(row).map_err(io)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub const RESULT_COLUMNS: [&str; 12] = [
    "config_hash",
    "scheme",
    "seed",
    "rule",
    "origin_device",
    "cefi_accuracy",
    "solo_accuracy",
    "oracle_accuracy",
    "input_sharing_accuracy",
    "edge_ensemble_accuracy",
    "ce_bytes_per_epoch",
    "inference_bytes_per_sample",
];
pub const SUMMARY_COLUMNS: [&str; 6] = ["config_hash", "scheme", "method", "mean", "std", "seeds"];
pub const PLOT_COLUMNS: [&str; 3] = ["x", "y", "series"];

/// Writes `results.csv`, `summary.csv` and `plot_data.csv` into `dir`.
pub fn emit_report(results: &[ExperimentResult], run_hash: u64, dir: impl AsRef<Path>) -> Result<ReportPaths> {
    emit_report_rows(&result_rows(results), run_hash, dir)
}

/// [`emit_report`] from already flattened rows, e.g. read back from disk.
pub fn emit_report_rows(rows: &[ResultRow], run_hash: u64, dir: impl AsRef<Path>) -> Result<ReportPaths> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let paths = ReportPaths {
        results: dir.join(RESULTS_FILE),
        summary: dir.join(SUMMARY_FILE),
        plot: dir.join(PLOT_FILE),
    };
    let summary = summary_rows(rows, run_hash);
    write_csv(&paths.results, rows, &RESULT_COLUMNS)?;
    write_csv(&paths.summary, &summary, &SUMMARY_COLUMNS)?;
    write_csv(&paths.plot, &plot_points(&summary), &PLOT_COLUMNS)?;
    Ok(paths)
}

pub fn read_csv<T: for<'de> Deserialize<'de>>(path: impl AsRef<Path>) -> Result<Vec<T>> {
    let path = path.as_ref();
    let mut r = csv::Reader::from_path(path).map_err(|e| Error::invalid(format!("{}: {e}", path.display())))?;
    r.deserialize()
        .map(|row| row.map_err(|e| Error::invalid(format!("{}: {e}", path.display()))))
        .collect()
}
