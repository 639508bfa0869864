//! The `run`, `strong-order`, and `ess-report` commands.

use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use ububu::config::{default_tau, InitDistribution, RunConfig};
use ububu::couplings::gaussian_state;
use ububu::diagnostics::{
    bootstrap_ci, ess_from, ess_table, mean, sample_variance, variance_breakdown, VarianceBreakdown,
};
use ububu::estimator::run_estimator;
use ububu::noise::{derive_seed, fill_gaussians};
use ububu::rhmc::{autotune, run_ensemble, AutotuneOptions, ChainSummary, RhmcConfig};
use ububu::strong_order::{strong_order, StrongOrderResult, StrongOrderSetup};
use ububu::{EstimatorReport, GaussianApprox, NoiseKey, PhaseState, Potential, Stream};

use crate::config::{ExperimentConfig, SamplerMode};
use crate::error::{CliError, CliResult, CoreContext};
use crate::output::{
    read_rows_csv, write_json, write_rows_csv, Provenance, ResultRow, REPORTS_JSON, RESULTS_CSV, RESULTS_JSON,
    TIMING_JSON,
};
use crate::target::{function_set, Target};

/// Output directory: explicit override, then the config's, then `results/<id>`.
pub fn output_dir(cfg: &ExperimentConfig, over: Option<&Path>) -> PathBuf {
    over.map(Path::to_path_buf)
        .or_else(|| cfg.output.clone())
        .unwrap_or_else(|| PathBuf::from("results").join(cfg.experiment_id()))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct ResultsFile {
    provenance: Provenance,
    rows: Vec<ResultRow>,
    breakdown: Option<VarianceBreakdown>,
    run_config: Option<RunConfig>,
    rhmc: Option<RhmcConfig>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(untagged)]
enum RunReports {
    Ububu(Vec<EstimatorReport>),
    Rhmc(Vec<ChainSummary>),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct ReportsFile {
    provenance: Provenance,
    reports: RunReports,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Timing {
    wall_seconds: f64,
    threads: usize,
}

pub struct RunOutcome {
    pub dir: PathBuf,
    pub rows: Vec<ResultRow>,
}

/// Runs `diagnostics.runs` independent estimators (or RHMC chains) and
/// writes rows, per-run reports, and timing into the output directory.
pub fn cmd_run(cfg: &ExperimentConfig, out: &Path) -> CliResult<RunOutcome> {
    let start = Instant::now();
    let target = Target::build(cfg)?;
    let specs = cfg.functions()?;
    let provenance = Provenance::new(cfg, target.dataset_hash.clone());
    let row = |function: &str, mode: SamplerMode| ResultRow {
        experiment: provenance.experiment.clone(),
        model: target.kind.to_string(),
        mode: mode.as_str().to_string(),
        d: target.dim(),
        kappa: target.kappa(),
        function: function.to_string(),
        estimate: f64::NAN,
        var_estimator: f64::NAN,
        var_pi: f64::NAN,
        ess: f64::NAN,
        grads_per_ess: f64::NAN,
        ci_lo: None,
        ci_hi: None,
        work: f64::NAN,
        work_excl_anchors: f64::NAN,
        seed: cfg.seed,
        config_hash: provenance.config_hash.clone(),
    };
    let mode = cfg.sampler.mode;

    let (rows, results, reports) = target.with_sampling(cfg.sampler.precondition, |p, approx, transform| {
        let fset = function_set(&specs, target.dim(), transform)?;
        let primaries = fset.primary_indices();
        match mode.gradient_mode() {
            Some(gm) => {
                let rc = ububu_config(cfg, gm, p, approx);
                rc.validate().during("run_config")?;
                let reports: Vec<EstimatorReport> = (0..cfg.diagnostics.runs as u64)
                    .into_par_iter()
                    .map(|r| {
                        let rc = RunConfig {
                            seed: derive_seed(cfg.seed, r),
                            ..rc.clone()
                        };
                        run_estimator(p, approx, &rc, &fset)
                    })
                    .collect::<ububu::Result<_>>()
                    .during("run_estimator")?;
                let refs: Vec<&EstimatorReport> = reports.iter().collect();
                let breakdown = variance_breakdown(&refs).during("variance_breakdown")?;
                let pairs: Vec<(usize, usize)> = primaries
                    .iter()
                    .map(|&i| (i, fset.square_index(i).expect("squares appended")))
                    .collect();
                let table = ess_table(
                    &refs,
                    &pairs,
                    cfg.diagnostics.bootstrap,
                    NoiseKey::new(cfg.seed, Stream::Bootstrap),
                )
                .during("ess")?;
                let rows: Vec<ResultRow> = table
                    .iter()
                    .map(|e| ResultRow {
                        estimate: e.estimate,
                        var_estimator: e.var_estimator,
                        var_pi: e.var_pi,
                        ess: e.ess,
                        grads_per_ess: e.grads_per_ess,
                        ci_lo: e.ci.map(|c| c.0),
                        ci_hi: e.ci.map(|c| c.1),
                        work: e.work,
                        work_excl_anchors: e.work_excl_anchors,
                        ..row(&e.name, mode)
                    })
                    .collect();
                let results = ResultsFile {
                    provenance: provenance.clone(),
                    rows: rows.clone(),
                    breakdown: Some(breakdown),
                    run_config: Some(rc),
                    rhmc: None,
                };
                Ok((rows, results, RunReports::Ububu(reports)))
            }
            None => {
                // On Gaussian targets the approximation is the target itself.
                let init_kind = cfg.sampler.init.unwrap_or(if target.kind == "gaussian" {
                    InitDistribution::GaussianApprox
                } else {
                    InitDistribution::MapDirac
                });
                let init = |r: u64| rhmc_init(approx, init_kind, NoiseKey::new(cfg.seed, Stream::Init).replicate(r));
                let rcfg = rhmc_config(cfg, p, approx, &init(0))?;
                let chains = run_ensemble(p, &rcfg, &fset, cfg.diagnostics.runs, cfg.seed, init).during("run_chain")?;
                let mut rows = Vec::with_capacity(primaries.len());
                for (j, &i) in primaries.iter().enumerate() {
                    let sq = fset.square_index(i).expect("squares appended");
                    let e = rhmc_ess(&chains, i, sq, cfg.diagnostics.bootstrap, NoiseKey::new(cfg.seed, Stream::Bootstrap).slot(j as u32))?;
                    rows.push(ResultRow {
                        estimate: e.0,
                        var_estimator: e.1,
                        var_pi: e.2,
                        ess: e.3,
                        grads_per_ess: e.4,
                        ci_lo: e.5.map(|c| c.0),
                        ci_hi: e.5.map(|c| c.1),
                        work: e.6,
                        work_excl_anchors: e.6,
                        ..row(&fset.names()[i], mode)
                    });
                }
                let results = ResultsFile {
                    provenance: provenance.clone(),
                    rows: rows.clone(),
                    breakdown: None,
                    run_config: None,
                    rhmc: Some(rcfg),
                };
                Ok((rows, results, RunReports::Rhmc(chains)))
            }
        }
    })?;

    std::fs::create_dir_all(out)?;
    write_rows_csv(&out.join(RESULTS_CSV), &rows)?;
    write_json(&out.join(RESULTS_JSON), &results)?;
    write_json(
        &out.join(REPORTS_JSON),
        &ReportsFile {
            provenance,
            reports,
        },
    )?;
    write_json(
        &out.join(TIMING_JSON),
        &Timing {
            wall_seconds: start.elapsed().as_secs_f64(),
            threads: rayon::current_num_threads(),
        },
    )?;
    Ok(RunOutcome {
        dir: out.to_path_buf(),
        rows,
    })
}

/// Run configuration with `γ = √m`, `h0 = 1/√M`, and the mode's burn-in and
/// schedule defaults, overridden by explicit sampler fields.
pub fn ububu_config(
    cfg: &ExperimentConfig,
    mode: ububu::GradientMode,
    p: &dyn Potential,
    approx: &GaussianApprox,
) -> RunConfig {
    let s = &cfg.sampler;
    let (m, big_m) = (approx.m(), approx.big_m());
    let h0 = s.h0.unwrap_or(1.0 / big_m.sqrt());
    let gamma = s.gamma.unwrap_or(m.sqrt());
    let mut rc = RunConfig::with_defaults(mode, h0, gamma, m, big_m, p.n_data());
    if let Some(n_b) = s.n_b {
        rc.tau = default_tau(p.n_data().max(1), n_b);
    }
    rc = s.apply(rc);
    rc.seed = cfg.seed;
    rc
}

fn rhmc_init(approx: &GaussianApprox, kind: InitDistribution, key: NoiseKey) -> PhaseState {
    match kind {
        InitDistribution::GaussianApprox => gaussian_state(approx, key),
        InitDistribution::MapDirac => {
            let mut v = vec![0.0; approx.dim()];
            fill_gaussians(key.step(-2), &mut v);
            PhaseState {
                x: approx.center().to_vec(),
                v,
            }
        }
    }
}

/// Explicit stepsize, or the tuned one starting from `h = 1/√M`.
fn rhmc_config(cfg: &ExperimentConfig, p: &dyn Potential, approx: &GaussianApprox, init: &PhaseState) -> CliResult<RhmcConfig> {
    let r = &cfg.sampler.rhmc;
    let m = approx.m();
    let h = r.h.unwrap_or(1.0 / approx.big_m().sqrt());
    let mut c = RhmcConfig::with_integration_time(h, m).during("rhmc_config")?;
    if let Some(el) = r.expected_l {
        c.expected_l = el;
    }
    c.alpha = r.alpha;
    c.k = r.steps;
    c.burn_in = r.burn_in;
    if r.autotune && r.h.is_none() {
        c = autotune(p, &c, m, init, cfg.seed, &AutotuneOptions::default()).during("autotune")?;
        if let Some(el) = r.expected_l {
            c.expected_l = el;
        }
    }
    c.validate().during("rhmc_config")?;
    Ok(c)
}

type RhmcEss = (f64, f64, f64, f64, f64, Option<(f64, f64)>, f64);

/// `(estimate, Var(S), Var_π, ESS, grads/ESS, CI, work)` with one chain
/// average as the estimator `S`.
fn rhmc_ess(chains: &[ChainSummary], f: usize, f_sq: usize, n_boot: usize, key: NoiseKey) -> CliResult<RhmcEss> {
    let stat = |cs: &[&ChainSummary]| -> Option<(f64, f64, f64, f64, f64)> {
        let est: Vec<f64> = cs.iter().map(|c| c.means[f]).collect();
        let sq: Vec<f64> = cs.iter().map(|c| c.means[f_sq]).collect();
        let m = mean(&est);
        let var_pi = mean(&sq) - m * m;
        let var_s = sample_variance(&est)?;
        let work = cs.iter().map(|c| c.grad_evals as f64).sum::<f64>() / cs.len() as f64;
        let (ess, gpe) = ess_from(var_pi, var_s, work).ok()?;
        Some((m, var_s, var_pi, ess, gpe))
    };
    let all: Vec<&ChainSummary> = chains.iter().collect();
    let work = chains.iter().map(|c| c.grad_evals as f64).sum::<f64>() / chains.len() as f64;
    let (m, var_s, var_pi, ess, gpe) = stat(&all).ok_or_else(|| CliError::Core {
        op: "ess",
        source: ububu::Error::Degenerate("RHMC chain averages have no spread".into()),
    })?;
    let ci = if n_boot > 0 {
        let boot = |s: &[&&ChainSummary]| {
            let cs: Vec<&ChainSummary> = s.iter().map(|c| **c).collect();
            stat(&cs).map(|t| t.4).unwrap_or(f64::NAN)
        };
        Some(bootstrap_ci(&all, boot, gpe, n_boot, key).during("bootstrap_ci")?)
    } else {
        None
    };
    Ok((m, var_s, var_pi, ess, gpe, ci, work))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct StrongOrderFile {
    provenance: Provenance,
    kernel: ububu::strong_order::StrongKernel,
    setup: StrongOrderSetup,
    result: StrongOrderResult,
    /// 95% normal interval on the slope.
    slope_ci: (f64, f64),
}

/// Coupled `(h, h/2)` gaps for each stepsize, written as `strong_order.csv`
/// (one row per stepsize) and `strong_order.json` (fit and skipped stepsizes).
pub fn cmd_strong_order(cfg: &ExperimentConfig, out: &Path) -> CliResult<StrongOrderResult> {
    let so = cfg
        .strong_order
        .as_ref()
        .ok_or_else(|| CliError::Config("strong_order: section missing".into()))?;
    let target = Target::build(cfg)?;
    let provenance = Provenance::new(cfg, target.dataset_hash.clone());
    let (setup, result) = target.with_sampling(cfg.sampler.precondition, |p, approx, _| {
        let n_b = so.n_b.unwrap_or((p.n_data() / 10).max(1));
        let setup = StrongOrderSetup {
            hs: so.hs.clone(),
            horizon: so.horizon,
            replicates: so.replicates,
            gamma: so.gamma.unwrap_or(approx.m().sqrt()),
            seed: cfg.seed,
            n_b,
            tau: so.tau.unwrap_or(default_tau(p.n_data().max(1), n_b)),
        };
        let init = |r: u64| gaussian_state(approx, NoiseKey::new(cfg.seed, Stream::Init).replicate(r));
        let result = strong_order(p, approx, so.kernel, &setup, init).during("strong_order")?;
        Ok((setup, result))
    })?;
    let se = result.fit.slope_se;
    let file = StrongOrderFile {
        provenance: provenance.clone(),
        kernel: so.kernel,
        setup,
        result: result.clone(),
        slope_ci: (result.fit.slope - 1.96 * se, result.fit.slope + 1.96 * se),
    };
    std::fs::create_dir_all(out)?;
    let mut w = csv::Writer::from_path(out.join("strong_order.csv"))?;
    w.write_record(["h", "rms_gap", "slope", "slope_se", "seed", "config_hash"])?;
    for r in &result.rows {
        w.write_record([
            r.h.to_string(),
            r.rms_gap.to_string(),
            result.fit.slope.to_string(),
            se.to_string(),
            cfg.seed.to_string(),
            provenance.config_hash.clone(),
        ])?;
    }
    w.flush()?;
    write_json(&out.join("strong_order.json"), &file)?;
    Ok(result)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistogramBin {
    pub experiment: String,
    pub mode: String,
    pub bin_lo: f64,
    pub bin_hi: f64,
    pub count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub experiment: String,
    pub model: String,
    pub mode: String,
    pub functions: usize,
    pub max_grads_per_ess: f64,
    pub max_function: String,
    pub ci_lo: Option<f64>,
    pub ci_hi: Option<f64>,
    pub seed: u64,
    pub config_hash: String,
}

pub struct EssReport {
    pub histogram: Vec<HistogramBin>,
    pub summary: Vec<SummaryRow>,
}

/// Gathers `results.csv` from `input` and its immediate subdirectories.
pub fn collect_rows(input: &Path) -> CliResult<Vec<ResultRow>> {
    let mut files = Vec::new();
    let direct = input.join(RESULTS_CSV);
    if direct.is_file() {
        files.push(direct);
    }
    if input.is_dir() {
        let mut subs: Vec<PathBuf> = std::fs::read_dir(input)?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.join(RESULTS_CSV).is_file())
            .collect();
        subs.sort();
        files.extend(subs.into_iter().map(|p| p.join(RESULTS_CSV)));
    }
    let mut rows = Vec::new();
    for f in files {
        rows.extend(read_rows_csv(&f)?);
    }
    if rows.is_empty() {
        return Err(CliError::data(input.display().to_string(), "no result rows found"));
    }
    Ok(rows)
}

/// Histogram of grads/ESS over functions and the max-over-functions summary,
/// one group per (experiment, mode) in order of first appearance.
pub fn ess_report(rows: &[ResultRow]) -> EssReport {
    let mut groups: Vec<(String, String, Vec<&ResultRow>)> = Vec::new();
    for r in rows {
        match groups.iter_mut().find(|g| g.0 == r.experiment && g.1 == r.mode) {
            Some(g) => g.2.push(r),
            None => groups.push((r.experiment.clone(), r.mode.clone(), vec![r])),
        }
    }
    let mut histogram = Vec::new();
    let mut summary = Vec::new();
    for (exp, mode, rs) in &groups {
        let vals: Vec<f64> = rs.iter().map(|r| r.grads_per_ess).filter(|v| v.is_finite()).collect();
        let lo = vals.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = vals.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let bins = if vals.is_empty() || lo == hi {
            1
        } else {
            ((vals.len() as f64).sqrt().ceil() as usize).clamp(1, 20)
        };
        let width = if bins > 1 { (hi - lo) / bins as f64 } else { 0.0 };
        let mut counts = vec![0usize; bins];
        for v in &vals {
            let b = if width > 0.0 { (((v - lo) / width) as usize).min(bins - 1) } else { 0 };
            counts[b] += 1;
        }
        for (b, c) in counts.into_iter().enumerate() {
            let (bl, bh) = if bins > 1 {
                (lo + b as f64 * width, if b + 1 == bins { hi } else { lo + (b + 1) as f64 * width })
            } else {
                (lo, hi)
            };
            histogram.push(HistogramBin {
                experiment: exp.clone(),
                mode: mode.clone(),
                bin_lo: bl,
                bin_hi: bh,
                count: c,
            });
        }
        let top = rs
            .iter()
            .filter(|r| r.grads_per_ess.is_finite())
            .max_by(|a, b| a.grads_per_ess.total_cmp(&b.grads_per_ess))
            .copied()
            .unwrap_or(rs[0]);
        summary.push(SummaryRow {
            experiment: exp.clone(),
            model: top.model.clone(),
            mode: mode.clone(),
            functions: rs.len(),
            max_grads_per_ess: top.grads_per_ess,
            max_function: top.function.clone(),
            ci_lo: top.ci_lo,
            ci_hi: top.ci_hi,
            seed: top.seed,
            config_hash: top.config_hash.clone(),
        });
    }
    EssReport { histogram, summary }
}

/// Reads result rows under `input` and writes `histogram.csv` and `summary.csv` to `out`.
pub fn cmd_ess_report(input: &Path, out: &Path) -> CliResult<EssReport> {
    let rows = collect_rows(input)?;
    let report = ess_report(&rows);
    std::fs::create_dir_all(out)?;
    let mut w = csv::Writer::from_path(out.join("histogram.csv"))?;
    for b in &report.histogram {
        w.serialize(b)?;
    }
    w.flush()?;
    let mut w = csv::Writer::from_path(out.join("summary.csv"))?;
    for s in &report.summary {
        w.serialize(s)?;
    }
    w.flush()?;
    Ok(report)
}
