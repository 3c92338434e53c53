//! Run summaries and the mean ± std accuracy table across runs.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::trainer::RunMetrics;

pub const SUMMARY_FILE: &str = "summary.json";

/// What a finished training run leaves next to its checkpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub name: String,
    pub method: String,
    /// Mean of the per-branch test accuracies.
    pub accuracy: f64,
    pub branch_accuracy: Vec<f64>,
    pub metrics: RunMetrics,
}

impl RunSummary {
    pub fn new(name: &str, metrics: RunMetrics) -> Result<Self> {
        let accuracy = run_accuracy(&metrics)
            .ok_or_else(|| Error::contract(format!("run `{name}` has no final accuracy to summarise")))?;
        Ok(RunSummary {
            name: name.to_string(),
            method: metrics.method.clone(),
            accuracy,
            branch_accuracy: metrics.final_accuracy.clone(),
            metrics,
        })
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        let path = dir.join(SUMMARY_FILE);
        fs::write(&path, serde_json::to_string_pretty(self)?).map_err(|e| Error::io(&path, e))
    }

    pub fn read(dir: &Path) -> Result<Self> {
        let path = dir.join(SUMMARY_FILE);
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}

/// Accuracy of a run: the mean over its branches' final test accuracies.
pub fn run_accuracy(metrics: &RunMetrics) -> Option<f64> {
    let acc = &metrics.final_accuracy;
    (!acc.is_empty()).then(|| acc.iter().sum::<f64>() / acc.len() as f64)
}

/// Mean and sample standard deviation (`n − 1`; zero for a single value).
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub name: String,
    pub method: String,
    pub runs: usize,
    pub accuracy_mean_pct: f64,
    pub accuracy_std_pct: f64,
}

/// Groups summaries by run name, keeping first-appearance order.
pub fn aggregate(summaries: &[RunSummary]) -> Vec<ReportRow> {
    let mut names: Vec<&str> = Vec::new();
    for s in summaries {
        if !names.contains(&s.name.as_str()) {
            names.push(&s.name);
        }
    }
    names
        .into_iter()
        .map(|name| {
            let group: Vec<&RunSummary> = summaries.iter().filter(|s| s.name == name).collect();
            let acc: Vec<f64> = group.iter().map(|s| 100.0 * s.accuracy).collect();
            let (mean, std) = mean_std(&acc);
            ReportRow {
                name: name.to_string(),
                method: group[0].method.clone(),
                runs: group.len(),
                accuracy_mean_pct: mean,
                accuracy_std_pct: std,
            }
        })
        .collect()
}

pub fn write_csv(rows: &[ReportRow], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_error(path, e))?;
    for row in rows {
        w.serialize(row).map_err(|e| csv_error(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

fn csv_error(path: &Path, e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::contract(format!("writing {}: {other:?}", path.display())),
    }
}

/// Run directories under `roots`: each root that holds a summary, or else
/// its immediate subdirectories that do (sorted by name).
pub fn collect_run_dirs(roots: &[PathBuf]) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for root in roots {
        if root.join(SUMMARY_FILE).is_file() {
            out.push(root.clone());
            continue;
        }
        let entries = fs::read_dir(root).map_err(|e| Error::io(root, e))?;
        let mut found: Vec<PathBuf> = entries
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.join(SUMMARY_FILE).is_file())
            .collect();
        if found.is_empty() {
            return Err(Error::contract(format!("no run summaries under {}", root.display())));
        }
        found.sort();
        out.extend(found);
    }
    Ok(out)
}
