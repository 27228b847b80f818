//! CSV reports. Floats are written in Rust's shortest round-trip form.

use std::path::Path;

use infusion_core::evaluation::Estimate;
use infusion_core::training::EpochRecord;
use infusion_core::{ChainTrace, EvalReport};

use crate::error::{CliError, Result};

pub const HISTORY_HEADER: [&str; 3] = ["epoch", "train_objective", "valid_lower_bound"];

pub const EVAL_HEADER: [&str; 12] = [
    "split",
    "points",
    "k",
    "repetitions",
    "isotropic",
    "dequantize",
    "lower_bound",
    "lower_bound_std",
    "importance_sampling",
    "importance_sampling_std",
    "parzen",
    "parzen_std",
];

pub const SWEEP_HEADER: [&str; 6] = ["cell", "steps", "alpha0", "omega", "best_epoch", "best_valid_lower_bound"];

/// Best validation result of one sweep cell.
#[derive(Clone, Debug, PartialEq)]
pub struct SweepRow {
    pub cell: usize,
    pub steps: usize,
    pub alpha0: f64,
    pub omega: f64,
    pub best_epoch: Option<usize>,
    pub best_valid_lower_bound: Option<f64>,
}

fn csv_err(path: &Path, e: csv::Error) -> CliError {
    CliError::Format(format!("{}: {}", path.display(), e))
}

fn write_rows(path: &Path, header: &[&str], rows: impl IntoIterator<Item = Vec<String>>) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
    w.write_record(header).map_err(|e| csv_err(path, e))?;
    for r in rows {
        w.write_record(&r).map_err(|e| csv_err(path, e))?;
    }
    w.flush().map_err(|e| crate::error::io_err(path, e))
}

fn opt<T: ToString>(v: Option<T>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

pub fn write_history(path: &Path, history: &[EpochRecord]) -> Result<()> {
    write_rows(
        path,
        &HISTORY_HEADER,
        history.iter().map(|r| vec![r.epoch.to_string(), r.train_objective.to_string(), r.valid_lower_bound.to_string()]),
    )
}

pub fn eval_row(split: &str, isotropic: bool, dequantize: bool, r: &EvalReport) -> Vec<String> {
    let parzen: Option<Estimate> = r.parzen;
    vec![
        split.to_string(),
        r.points.to_string(),
        r.k.to_string(),
        r.repetitions.to_string(),
        isotropic.to_string(),
        dequantize.to_string(),
        r.lower_bound.mean.to_string(),
        r.lower_bound.std.to_string(),
        r.importance_sampling.mean.to_string(),
        r.importance_sampling.std.to_string(),
        opt(parzen.map(|p| p.mean)),
        opt(parzen.map(|p| p.std)),
    ]
}

pub fn write_eval(path: &Path, split: &str, isotropic: bool, dequantize: bool, report: &EvalReport) -> Result<()> {
    write_rows(path, &EVAL_HEADER, [eval_row(split, isotropic, dequantize, report)])
}

pub fn write_sweep(path: &Path, rows: &[SweepRow]) -> Result<()> {
    write_rows(
        path,
        &SWEEP_HEADER,
        rows.iter().map(|r| {
            vec![
                r.cell.to_string(),
                r.steps.to_string(),
                r.alpha0.to_string(),
                r.omega.to_string(),
                opt(r.best_epoch),
                opt(r.best_valid_lower_bound),
            ]
        }),
    )
}

/// One line per chain and state: `chain, step, log_p, x0 .. x{d-1}`.
pub fn write_chain(path: &Path, trace: &ChainTrace) -> Result<()> {
    let d = trace.states.first().map(|s| s.cols()).unwrap_or(0);
    let mut header = vec!["chain".to_string(), "step".to_string(), "log_p".to_string()];
    header.extend((0..d).map(|j| format!("x{}", j)));
    let header: Vec<&str> = header.iter().map(String::as_str).collect();
    let mut rows = Vec::new();
    for i in 0..trace.chains() {
        for (s, state) in trace.states.iter().enumerate() {
            let mut row = vec![i.to_string(), s.to_string(), trace.model_logp[s][i].to_string()];
            row.extend(state.row(i).iter().map(|v| v.to_string()));
            rows.push(row);
        }
    }
    write_rows(path, &header, rows)
}
