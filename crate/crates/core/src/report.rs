//! Run reports and their on-disk form: `results.json`, `matrix.csv`, `curves.csv`.
//!
//! Accuracies are fractions in JSON and percentages with two decimals in CSV.
//! Wall-clock numbers live under the `timing` key only, so two runs with the
//! same config and seed agree on everything else byte for byte.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::config::{ExperimentConfig, GateMode, Method};
use crate::error::{Error, Result};
use crate::metrics::{avg_series, AccuracyMatrix};

pub const RESULTS_FILE: &str = "results.json";
pub const MATRIX_FILE: &str = "matrix.csv";
pub const CURVES_FILE: &str = "curves.csv";
pub const CURVES_HEADER: &str = "step,last,avg,new_task_acc,old_task_acc";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepDiagnostics {
    pub step: usize,
    pub routing_accuracy: f64,
    pub multi_fire_rate: f64,
    /// Index `i` is gate `i + 1`.
    pub firing_rates: Vec<f64>,
    pub gate_threshold: f64,
    pub gate_train_steps: usize,
    pub num_params: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub config: ExperimentConfig,
    pub config_hash: String,
    pub method: Method,
    pub gate_mode: GateMode,
    pub num_tasks: usize,
    pub last: Vec<f64>,
    pub avg: Vec<f64>,
    /// `A[t][t]`: accuracy on the newest task alone after step `t`.
    pub final_task_only: Vec<f64>,
    pub new_task_acc: Vec<f64>,
    pub old_task_acc: Vec<Option<f64>>,
    pub matrix: AccuracyMatrix,
    /// Gate diagnostics per step; empty for the sequential baseline.
    pub steps: Vec<StepDiagnostics>,
    /// Held-out balanced accuracy of each gate after the last step.
    pub gate_balanced_accuracy: Vec<f64>,
    pub backbone_train_accuracy: Option<f64>,
    pub adapter_train_accuracy: Vec<f64>,
    pub checksums: BTreeMap<String, String>,
    /// Seconds per phase. Not deterministic.
    pub timing: BTreeMap<String, f64>,
}

impl RunReport {
    #[allow(clippy::too_many_arguments)]
    pub fn build(
        cfg: &ExperimentConfig,
        matrix: AccuracyMatrix,
        steps: Vec<StepDiagnostics>,
        gate_balanced_accuracy: Vec<f64>,
        backbone_train_accuracy: Option<f64>,
        adapter_train_accuracy: Vec<f64>,
        checksums: BTreeMap<String, String>,
        timing: BTreeMap<String, f64>,
    ) -> Self {
        let t = matrix.steps();
        let last = matrix.seen.clone();
        let new_task_acc: Vec<f64> = (1..=t).map(|s| matrix.new_task_accuracy(s).expect("row exists")).collect();
        Self {
            config: cfg.clone(),
            config_hash: cfg.hash(),
            method: cfg.method,
            gate_mode: cfg.gate.mode,
            num_tasks: matrix.num_tasks(),
            avg: avg_series(&last),
            last,
            final_task_only: new_task_acc.clone(),
            new_task_acc,
            old_task_acc: (1..=t).map(|s| matrix.old_task_accuracy(s)).collect(),
            matrix,
            steps,
            gate_balanced_accuracy,
            backbone_train_accuracy,
            adapter_train_accuracy,
            checksums,
            timing,
        }
    }

    pub fn last_final(&self) -> Option<f64> {
        self.last.last().copied()
    }

    pub fn avg_final(&self) -> Option<f64> {
        self.avg.last().copied()
    }

    pub fn to_json(&self) -> Result<String> {
        let mut s = serde_json::to_string_pretty(self)?;
        s.push('\n');
        Ok(s)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }

    pub fn matrix_csv(&self) -> String {
        let n = self.matrix.num_tasks();
        let mut out = String::from("step");
        for j in 1..=n {
            write!(out, ",task_{j}").expect("string write");
        }
        out.push('\n');
        for (i, row) in self.matrix.rows.iter().enumerate() {
            write!(out, "{}", i + 1).expect("string write");
            for j in 0..n {
                out.push(',');
                if let Some(a) = row.get(j) {
                    out.push_str(&percent(*a));
                }
            }
            out.push('\n');
        }
        out
    }

    pub fn curves_csv(&self) -> String {
        let mut out = format!("{CURVES_HEADER}\n");
        for i in 0..self.last.len() {
            let old = self.old_task_acc[i].map(percent).unwrap_or_default();
            writeln!(
                out,
                "{},{},{},{},{}",
                i + 1,
                percent(self.last[i]),
                percent(self.avg[i]),
                percent(self.new_task_acc[i]),
                old
            )
            .expect("string write");
        }
        out
    }
}

fn percent(x: f64) -> String {
    format!("{:.2}", 100.0 * x)
}

/// Writes the three report files into `out_dir`, creating it if needed.
pub fn emit_report(report: &RunReport, out_dir: &Path) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let files = [
        (RESULTS_FILE, report.to_json()?),
        (MATRIX_FILE, report.matrix_csv()),
        (CURVES_FILE, report.curves_csv()),
    ];
    let mut written = Vec::with_capacity(files.len());
    for (name, body) in files {
        let path = out_dir.join(name);
        fs::write(&path, body).map_err(|e| Error::io(&path, e))?;
        written.push(path);
    }
    Ok(written)
}

/// `results.json` with the `timing` object removed, for determinism checks.
pub fn strip_timing(json: &str) -> Result<serde_json::Value> {
    let mut v: serde_json::Value = serde_json::from_str(json)?;
    if let Some(obj) = v.as_object_mut() {
        obj.remove("timing");
    }
    Ok(v)
}
