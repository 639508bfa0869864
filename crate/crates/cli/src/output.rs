//! Result rows and file writers.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::config::ExperimentConfig;
use crate::error::CliResult;

pub const RESULTS_CSV: &str = "results.csv";
pub const RESULTS_JSON: &str = "results.json";
pub const REPORTS_JSON: &str = "reports.json";
pub const TIMING_JSON: &str = "timing.json";

/// One test function under one sampler. Wall time lives in `timing.json`
/// so these rows are reproducible byte for byte.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub experiment: String,
    pub model: String,
    pub mode: String,
    pub d: usize,
    pub kappa: f64,
    pub function: String,
    pub estimate: f64,
    pub var_estimator: f64,
    pub var_pi: f64,
    pub ess: f64,
    pub grads_per_ess: f64,
    pub ci_lo: Option<f64>,
    pub ci_hi: Option<f64>,
    /// Mean work per run in full-data gradient passes.
    pub work: f64,
    /// Mean work per run with anchor refreshes left out.
    pub work_excl_anchors: f64,
    pub seed: u64,
    pub config_hash: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub experiment: String,
    pub config_hash: String,
    pub seed: u64,
    pub version: String,
    pub dataset_hash: Option<String>,
    /// ESS is computed for the whole estimator (one run), not per chain.
    pub ess_normalization: String,
    pub work_unit: String,
}

impl Provenance {
    pub fn new(cfg: &ExperimentConfig, dataset_hash: Option<String>) -> Self {
        Provenance {
            experiment: cfg.experiment_id().to_string(),
            config_hash: cfg.hash(),
            seed: cfg.seed,
            version: env!("CARGO_PKG_VERSION").to_string(),
            dataset_hash,
            ess_normalization: "per-ensemble".into(),
            work_unit: "full-data gradient passes".into(),
        }
    }
}

pub fn write_rows_csv(path: &Path, rows: &[ResultRow]) -> CliResult<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_rows_csv(path: &Path) -> CliResult<Vec<ResultRow>> {
    let mut r = csv::Reader::from_path(path)?;
    let rows = r.deserialize().collect::<Result<Vec<ResultRow>, _>>()?;
    Ok(rows)
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> CliResult<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    std::fs::write(path, text)?;
    Ok(())
}
