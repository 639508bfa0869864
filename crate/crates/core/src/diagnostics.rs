//! Variance and ESS estimation, bootstrap intervals, slope fits, and
//! closed-form stationary moments of linear-Gaussian chains.

use nalgebra::{Matrix2, Matrix4, Vector4};
use rand::Rng;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ChiSquared, ContinuousCDF};

use crate::error::{Error, Result};
use crate::estimator::EstimatorReport;
use crate::noise::NoiseKey;

/// Unbiased sample variance; `None` for fewer than two values.
pub fn sample_variance(xs: &[f64]) -> Option<f64> {
    if xs.len() < 2 {
        return None;
    }
    let n = xs.len() as f64;
    let m = xs.iter().sum::<f64>() / n;
    Some(xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0))
}

pub fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LevelVariance {
    pub level: u32,
    pub count: u32,
    /// Pooled `Var(D_{l,l+1})` per function; `None` with fewer than two pooled samples.
    pub var_d: Option<Vec<f64>>,
    /// `Var(D)/N_{l,l+1}`.
    pub contribution: Option<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VarianceBreakdown {
    pub names: Vec<String>,
    pub runs: usize,
    pub var_d0: Vec<f64>,
    /// `Var(D_0)/N`.
    pub level0: Vec<f64>,
    pub levels: Vec<LevelVariance>,
    /// Across-run variance of the tail sum.
    pub tail: Vec<f64>,
    /// Sum of the available components.
    pub total: Vec<f64>,
    /// Whether every level's variance was estimable.
    pub complete: bool,
}

/// Adds the per-term variances: pooled level-0 and pairwise `D` variances
/// weighted by their counts, plus the across-run variance of the tail.
pub fn variance_breakdown(reports: &[&EstimatorReport]) -> Result<VarianceBreakdown> {
    if reports.len() < 2 {
        return Err(Error::InvalidInput("the tail variance needs at least two runs".into()));
    }
    let first = reports[0];
    let nf = first.names.len();
    for r in reports {
        if r.names != first.names
            || r.schedule.big_l != first.schedule.big_l
            || r.schedule.counts[..=first.schedule.big_l as usize] != first.schedule.counts[..=first.schedule.big_l as usize]
            || r.d0.len() != first.d0.len()
        {
            return Err(Error::InvalidInput("reports come from different configurations".into()));
        }
    }
    let pooled = |rows: &mut dyn Iterator<Item = &Vec<f64>>| -> Vec<Vec<f64>> {
        let mut cols = vec![Vec::new(); nf];
        for row in rows {
            for (c, v) in cols.iter_mut().zip(row) {
                c.push(*v);
            }
        }
        cols
    };
    let n = first.d0.len() as f64;
    let d0_cols = pooled(&mut reports.iter().flat_map(|r| r.d0.iter()));
    let var_d0: Vec<f64> = d0_cols.iter().map(|c| sample_variance(c).unwrap_or(0.0)).collect();
    let level0: Vec<f64> = var_d0.iter().map(|v| v / n).collect();
    let mut total = level0.clone();
    let mut complete = true;
    let mut levels = Vec::new();
    for l in 0..first.schedule.big_l {
        let count = first.schedule.count(l);
        let cols = pooled(&mut reports.iter().flat_map(|r| r.pairs[l as usize].d.iter()));
        let var_d: Option<Vec<f64>> = cols.iter().map(|c| sample_variance(c)).collect();
        let contribution = var_d.as_ref().map(|v| v.iter().map(|x| x / f64::from(count)).collect::<Vec<_>>());
        match &contribution {
            Some(c) => total.iter_mut().zip(c).for_each(|(t, x)| *t += x),
            None => complete = false,
        }
        levels.push(LevelVariance {
            level: l,
            count,
            var_d,
            contribution,
        });
    }
    let tail: Vec<f64> = (0..nf)
        .map(|i| {
            let xs: Vec<f64> = reports.iter().map(|r| r.components.s_tail[i]).collect();
            sample_variance(&xs).unwrap_or(0.0)
        })
        .collect();
    total.iter_mut().zip(&tail).for_each(|(t, x)| *t += x);
    Ok(VarianceBreakdown {
        names: first.names.clone(),
        runs: reports.len(),
        var_d0,
        level0,
        levels,
        tail,
        total,
        complete,
    })
}

/// Direct across-run sample variance of the estimates.
pub fn direct_variance(reports: &[&EstimatorReport]) -> Result<Vec<f64>> {
    if reports.len() < 2 {
        return Err(Error::InvalidInput("need at least two runs".into()));
    }
    let nf = reports[0].names.len();
    Ok((0..nf)
        .map(|i| {
            let xs: Vec<f64> = reports.iter().map(|r| r.estimate()[i]).collect();
            sample_variance(&xs).unwrap_or(0.0)
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EssEntry {
    pub name: String,
    /// Grand mean of the estimates.
    pub estimate: f64,
    pub var_pi: f64,
    pub var_estimator: f64,
    pub ess: f64,
    /// Mean work per run in full-data passes.
    pub work: f64,
    /// Mean work per run with anchor refreshes left out.
    pub work_excl_anchors: f64,
    pub grads_per_ess: f64,
    pub ci: Option<(f64, f64)>,
}

/// `ESS = Var_π / Var(S)` and `grads/ESS = work · Var(S) / Var_π`.
pub fn ess_from(var_pi: f64, var_estimator: f64, work: f64) -> Result<(f64, f64)> {
    if !(var_pi > 0.0) || !var_pi.is_finite() {
        return Err(Error::Degenerate(format!("posterior variance {var_pi} is not positive")));
    }
    if !(var_estimator > 0.0) {
        return Err(Error::Degenerate(format!("estimator variance {var_estimator} is not positive")));
    }
    let ess = var_pi / var_estimator;
    Ok((ess, work / ess))
}

/// ESS of function `f` whose square is stored at index `f_sq`; the estimator
/// variance comes from [`variance_breakdown`].
pub fn ess(reports: &[&EstimatorReport], f: usize, f_sq: usize) -> Result<EssEntry> {
    let vb = variance_breakdown(reports)?;
    ess_with(reports, &vb, f, f_sq)
}

fn ess_with(reports: &[&EstimatorReport], vb: &VarianceBreakdown, f: usize, f_sq: usize) -> Result<EssEntry> {
    let nf = vb.names.len();
    if f >= nf || f_sq >= nf {
        return Err(Error::InvalidInput(format!("function index out of range 0..{nf}")));
    }
    let est: Vec<f64> = reports.iter().map(|r| r.estimate()[f]).collect();
    let sq: Vec<f64> = reports.iter().map(|r| r.estimate()[f_sq]).collect();
    let m = mean(&est);
    let var_pi = mean(&sq) - m * m;
    let work = reports.iter().map(|r| r.passes()).sum::<f64>() / reports.len() as f64;
    let work_excl_anchors = reports.iter().map(|r| r.passes_excluding_anchors()).sum::<f64>() / reports.len() as f64;
    let (ess, gpe) = ess_from(var_pi, vb.total[f], work)?;
    Ok(EssEntry {
        name: vb.names[f].clone(),
        estimate: m,
        var_pi,
        var_estimator: vb.total[f],
        ess,
        work,
        work_excl_anchors,
        grads_per_ess: gpe,
        ci: None,
    })
}

/// ESS entries for every function with a stored square, with bootstrap
/// intervals on grads/ESS when `n_boot > 0`.
pub fn ess_table(reports: &[&EstimatorReport], pairs: &[(usize, usize)], n_boot: usize, key: NoiseKey) -> Result<Vec<EssEntry>> {
    let vb = variance_breakdown(reports)?;
    let mut out = Vec::with_capacity(pairs.len());
    for (j, &(f, f_sq)) in pairs.iter().enumerate() {
        let mut e = ess_with(reports, &vb, f, f_sq)?;
        if n_boot > 0 {
            let stat = |sample: &[&&EstimatorReport]| -> f64 {
                let rs: Vec<&EstimatorReport> = sample.iter().map(|r| **r).collect();
                variance_breakdown(&rs)
                    .and_then(|vb| ess_with(&rs, &vb, f, f_sq))
                    .map(|e| e.grads_per_ess)
                    .unwrap_or(f64::NAN)
            };
            let refs: Vec<&EstimatorReport> = reports.to_vec();
            e.ci = Some(bootstrap_ci(&refs, stat, e.grads_per_ess, n_boot, key.slot(j as u32))?);
        }
        out.push(e);
    }
    Ok(out)
}

/// Percentile bootstrap interval (2.5%, 97.5%) of `stat` over runs
/// resampled with replacement; widened if needed to contain `point`.
/// Resamples where the statistic is not finite are dropped.
pub fn bootstrap_ci<T, F>(runs: &[T], stat: F, point: f64, n_boot: usize, key: NoiseKey) -> Result<(f64, f64)>
where
    F: Fn(&[&T]) -> f64,
{
    if runs.len() < 8 {
        return Err(Error::InvalidInput(format!("bootstrap needs at least 8 runs, got {}", runs.len())));
    }
    if n_boot < 1 {
        return Err(Error::InvalidInput("n_boot must be positive".into()));
    }
    let mut rng = key.rng();
    let mut vals = Vec::with_capacity(n_boot);
    let mut sample: Vec<&T> = Vec::with_capacity(runs.len());
    for _ in 0..n_boot {
        sample.clear();
        for _ in 0..runs.len() {
            sample.push(&runs[rng.random_range(0..runs.len())]);
        }
        let v = stat(&sample);
        if v.is_finite() {
            vals.push(v);
        }
    }
    if vals.is_empty() {
        return Err(Error::Degenerate("no finite bootstrap statistic".into()));
    }
    vals.sort_by(f64::total_cmp);
    let lo = quantile_sorted(&vals, 0.025);
    let hi = quantile_sorted(&vals, 0.975);
    Ok((lo.min(point), hi.max(point)))
}

/// Linear-interpolation quantile of sorted data.
pub fn quantile_sorted(v: &[f64], q: f64) -> f64 {
    let pos = q * (v.len() - 1) as f64;
    let i = pos.floor() as usize;
    let j = (i + 1).min(v.len() - 1);
    v[i] + (pos - i as f64) * (v[j] - v[i])
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SlopeFit {
    pub slope: f64,
    pub intercept: f64,
    /// Standard error of the slope; zero for an exact fit or two points.
    pub slope_se: f64,
}

/// Least-squares slope of `log gap` against `log h`.
pub fn strong_order_fit(hs: &[f64], gaps: &[f64]) -> Result<SlopeFit> {
    if hs.len() != gaps.len() {
        return Err(Error::DimensionMismatch {
            expected: hs.len(),
            got: gaps.len(),
        });
    }
    if hs.len() < 4 {
        return Err(Error::InvalidInput("need at least four stepsizes".into()));
    }
    if hs.iter().chain(gaps).any(|v| !(v > &0.0) || !v.is_finite()) {
        return Err(Error::InvalidInput("stepsizes and gaps must be positive".into()));
    }
    let mut pts: Vec<(f64, f64)> = hs.iter().zip(gaps).map(|(h, g)| (h.ln(), g.ln())).collect();
    pts.sort_by(|a, b| a.0.total_cmp(&b.0));
    if pts.last().unwrap().0 - pts[0].0 < 8f64.ln() - 1e-12 {
        return Err(Error::InvalidInput("stepsizes must span at least a factor 8".into()));
    }
    let n = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let sxx = pts.iter().map(|p| (p.0 - mx).powi(2)).sum::<f64>();
    let sxy = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum::<f64>();
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let rss = pts.iter().map(|p| (p.1 - intercept - slope * p.0).powi(2)).sum::<f64>();
    let slope_se = if pts.len() > 2 { (rss / (n - 2.0) / sxx).sqrt() } else { 0.0 };
    Ok(SlopeFit {
        slope,
        intercept,
        slope_se,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LinearKernel {
    Ubu,
    Em,
    Oho,
}

/// Stationary moments of a linear-Gaussian chain per eigencoordinate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StationaryMoments {
    pub mean_x: Vec<f64>,
    pub var_x: Vec<f64>,
    pub cov_xv: Vec<f64>,
    pub var_v: Vec<f64>,
}

/// Transition matrix and noise covariance of one step on `U = λx²/2`.
fn mode_kernel(lambda: f64, h: f64, gamma: f64, kind: LinearKernel) -> (Matrix2<f64>, Matrix2<f64>) {
    match kind {
        LinearKernel::Em => {
            let t = Matrix2::new(1.0, h, -h * lambda, 1.0 - h * gamma);
            let q = Matrix2::new(0.0, 0.0, 0.0, 2.0 * gamma * h);
            (t, q)
        }
        LinearKernel::Ubu => {
            let s = h / 2.0;
            let eta = (-gamma * s).exp();
            // Z1 = ∫dW, Z2 = ∫e^{−γ(s−r)}dW over [0, s].
            let f = -(-gamma * s).exp_m1() / gamma;
            let var2 = -(-2.0 * gamma * s).exp_m1() / (2.0 * gamma);
            let u = Matrix2::new(1.0, f, 0.0, eta);
            let qu = Matrix2::new(
                2.0 / gamma * (s - 2.0 * f + var2),
                2.0 * (f - var2),
                2.0 * (f - var2),
                2.0 * gamma * var2,
            );
            let b = Matrix2::new(1.0, 0.0, -h * lambda, 1.0);
            let ub = u * b;
            (ub * u, ub * qu * ub.transpose() + qu)
        }
        LinearKernel::Oho => {
            let s = h / 2.0;
            let eta = (-gamma * s).exp();
            let o = Matrix2::new(1.0, 0.0, 0.0, eta);
            let qo = Matrix2::new(0.0, 0.0, 0.0, 1.0 - eta * eta);
            let w = lambda.sqrt();
            let (sn, cs) = (w * h).sin_cos();
            let hm = Matrix2::new(cs, sn / w, -w * sn, cs);
            let oh = o * hm;
            (oh * o, oh * qo * oh.transpose() + qo)
        }
    }
}

/// Solves `Σ = T Σ Tᵀ + Q` for each eigenvalue of a diagonal precision;
/// the stationary mean is `center`.
pub fn lyapunov_oracle(
    precision: &[f64],
    center: &[f64],
    h: f64,
    gamma: f64,
    kind: LinearKernel,
) -> Result<StationaryMoments> {
    if precision.len() != center.len() {
        return Err(Error::DimensionMismatch {
            expected: precision.len(),
            got: center.len(),
        });
    }
    if !(h > 0.0 && gamma > 0.0) {
        return Err(Error::InvalidInput("h and gamma must be positive".into()));
    }
    let mut out = StationaryMoments {
        mean_x: center.to_vec(),
        var_x: Vec::with_capacity(precision.len()),
        cov_xv: Vec::with_capacity(precision.len()),
        var_v: Vec::with_capacity(precision.len()),
    };
    for &lambda in precision {
        if !(lambda > 0.0) {
            return Err(Error::InvalidInput(format!("precision eigenvalue {lambda} is not positive")));
        }
        if kind == LinearKernel::Oho {
            out.var_x.push(1.0 / lambda);
            out.cov_xv.push(0.0);
            out.var_v.push(1.0);
            continue;
        }
        let (t, q) = mode_kernel(lambda, h, gamma, kind);
        let rho = t
            .complex_eigenvalues()
            .iter()
            .map(|e| e.norm())
            .fold(0.0f64, f64::max);
        if rho >= 1.0 {
            return Err(Error::Unstable(format!(
                "spectral radius {rho:.6} at λ = {lambda}, h = {h}"
            )));
        }
        // Column-major vec: vec(TΣTᵀ) = (T ⊗ T) vec(Σ).
        let mut kron = Matrix4::zeros();
        for i in 0..2 {
            for j in 0..2 {
                for k in 0..2 {
                    for l in 0..2 {
                        kron[(2 * j + i, 2 * l + k)] = t[(i, k)] * t[(j, l)];
                    }
                }
            }
        }
        let a = Matrix4::identity() - kron;
        let b = Vector4::new(q[(0, 0)], q[(1, 0)], q[(0, 1)], q[(1, 1)]);
        let sol = a
            .lu()
            .solve(&b)
            .ok_or_else(|| Error::Unstable("singular Lyapunov system".into()))?;
        out.var_x.push(sol[0]);
        out.cov_xv.push(0.5 * (sol[1] + sol[2]));
        out.var_v.push(sol[3]);
    }
    Ok(out)
}

/// Pearson χ² goodness of fit; returns `(statistic, p-value)`.
pub fn chi_square_test(observed: &[u64], expected_probs: &[f64]) -> Result<(f64, f64)> {
    if observed.len() != expected_probs.len() || observed.len() < 2 {
        return Err(Error::InvalidInput("need matching bins, at least two".into()));
    }
    let n: u64 = observed.iter().sum();
    let total_p: f64 = expected_probs.iter().sum();
    let mut stat = 0.0;
    for (&o, &p) in observed.iter().zip(expected_probs) {
        let e = n as f64 * p / total_p;
        if !(e > 0.0) {
            return Err(Error::InvalidInput("expected counts must be positive".into()));
        }
        stat += (o as f64 - e).powi(2) / e;
    }
    let dist = ChiSquared::new((observed.len() - 1) as f64).map_err(|e| Error::InvalidInput(e.to_string()))?;
    Ok((stat, 1.0 - dist.cdf(stat)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::GradientMode;
    use crate::estimator::{Assembled, LevelSamples, LevelSchedule, TailTerm};
    use crate::inexact::WorkLedger;
    use crate::noise::{draw_gaussians, Stream};

    fn report(d0: Vec<f64>, pair0: Vec<f64>, tail: f64, est: f64, passes: u64) -> EstimatorReport {
        let schedule = LevelSchedule {
            n: d0.len(),
            c_n: 1.0,
            phi_n: 4.0,
            big_l: 1,
            counts: vec![pair0.len() as u32, 1],
        };
        EstimatorReport {
            mode: GradientMode::Exact,
            names: vec!["f".into()],
            c_r: 0.0,
            n_data: 0,
            schedule,
            d0: d0.into_iter().map(|x| vec![x]).collect(),
            pairs: vec![LevelSamples {
                level: 0,
                d: pair0.into_iter().map(|x| vec![x]).collect(),
                work: WorkLedger::default(),
            }],
            tail: vec![TailTerm { level: 1, d: vec![tail] }],
            components: Assembled {
                s0: vec![0.0],
                s_pairs: vec![vec![0.0]],
                s_tail: vec![tail],
                estimate: vec![est],
            },
            work_level0: WorkLedger::default(),
            work_tail: WorkLedger::default(),
            work: WorkLedger {
                full_gradients: passes,
                ..Default::default()
            },
        }
    }

    #[test]
    fn identical_d_gives_zero_components() {
        let a = report(vec![1.0, 1.0], vec![0.5, 0.5], 0.1, 2.0, 10);
        let b = a.clone();
        let vb = variance_breakdown(&[&a, &b]).unwrap();
        assert_eq!(vb.total, vec![0.0]);
    }

    #[test]
    fn plug_in_reconstruction() {
        let a = report(vec![1.0, 3.0], vec![0.0, 1.0], 0.5, 2.0, 10);
        let b = report(vec![2.0, 6.0], vec![2.0, -1.0], -0.5, 2.0, 10);
        let vb = variance_breakdown(&[&a, &b]).unwrap();
        let v0 = sample_variance(&[1.0, 3.0, 2.0, 6.0]).unwrap();
        let v1 = sample_variance(&[0.0, 1.0, 2.0, -1.0]).unwrap();
        let expect = v0 / 2.0 + v1 / 2.0 + 0.5;
        assert!((vb.total[0] - expect).abs() < 1e-12);
        assert!(vb.complete);
    }

    #[test]
    fn single_pooled_sample_is_flagged() {
        let a = report(vec![1.0, 3.0], vec![0.5], 0.5, 2.0, 10);
        let vb = variance_breakdown(&[&a]);
        assert!(vb.is_err());
        let b = report(vec![1.0, 2.0], vec![0.7], 0.1, 2.0, 10);
        let vb = variance_breakdown(&[&a, &b]).unwrap();
        assert!(vb.complete && vb.levels[0].var_d.is_some());
    }

    #[test]
    fn ess_arithmetic() {
        let (ess, gpe) = ess_from(1.0, 0.01, 5000.0).unwrap();
        assert!((ess - 100.0).abs() < 1e-9 && (gpe - 50.0).abs() < 1e-9);
        assert!(ess_from(0.0, 0.01, 1.0).is_err());
    }

    #[test]
    fn ess_scale_equivariant() {
        let (e1, _) = ess_from(2.0, 0.3, 1.0).unwrap();
        let (e2, _) = ess_from(2.0 * 9.0, 0.3 * 9.0, 1.0).unwrap();
        assert!((e1 - e2).abs() < 1e-12);
    }

    #[test]
    fn bootstrap_identical_runs() {
        let runs = vec![1.5; 10];
        let ci = bootstrap_ci(&runs, |s| s.iter().map(|x| **x).sum::<f64>() / s.len() as f64, 1.5, 200, NoiseKey::new(1, Stream::Bootstrap)).unwrap();
        assert_eq!(ci, (1.5, 1.5));
        assert!(bootstrap_ci(&runs[..5], |_| 0.0, 0.0, 10, NoiseKey::new(1, Stream::Bootstrap)).is_err());
    }

    #[test]
    fn bootstrap_coverage() {
        let trials = 1000;
        let mut covered = 0;
        for t in 0..trials {
            let xs = draw_gaussians(NoiseKey::new(2, Stream::Scratch).step(t), 50);
            let m = mean(&xs);
            let (lo, hi) = bootstrap_ci(&xs, |s| s.iter().map(|x| **x).sum::<f64>() / s.len() as f64, m, 400, NoiseKey::new(3, Stream::Bootstrap).step(t)).unwrap();
            covered += usize::from(lo <= 0.0 && 0.0 <= hi);
        }
        let f = covered as f64 / trials as f64;
        assert!((0.92..=0.98).contains(&f), "{f}");
    }

    #[test]
    fn exact_slope() {
        let hs = [0.05, 0.4, 0.1, 0.2];
        let gaps: Vec<f64> = hs.iter().map(|h| 3.0 * h * h).collect();
        let f = strong_order_fit(&hs, &gaps).unwrap();
        assert!((f.slope - 2.0).abs() < 1e-12);
        assert!(strong_order_fit(&hs[..3], &gaps[..3]).is_err());
        assert!(strong_order_fit(&[0.1, 0.12, 0.14, 0.16], &[1.0; 4]).is_err());
        assert!(strong_order_fit(&hs, &[1.0, 0.0, 1.0, 1.0]).is_err());
    }

    #[test]
    fn noisy_three_halves() {
        let hs: [f64; 5] = [0.4, 0.2, 0.1, 0.05, 0.025];
        let noise = draw_gaussians(NoiseKey::new(4, Stream::Scratch), hs.len());
        let gaps: Vec<f64> = hs.iter().zip(&noise).map(|(h, e)| h.powf(1.5) * (1.0 + 0.05 * e)).collect();
        let f = strong_order_fit(&hs, &gaps).unwrap();
        assert!((f.slope - 1.5).abs() < 0.1);
    }

    #[test]
    fn oho_oracle_is_exact() {
        let m = lyapunov_oracle(&[2.0, 0.5], &[1.0, -1.0], 0.7, 1.0, LinearKernel::Oho).unwrap();
        assert_eq!(m.var_x, vec![0.5, 2.0]);
        assert_eq!(m.var_v, vec![1.0, 1.0]);
        assert_eq!(m.mean_x, vec![1.0, -1.0]);
    }

    #[test]
    fn oho_fixed_point_matches_closed_form() {
        // The general solver must agree with the exact-invariance shortcut.
        let (t, q) = mode_kernel(2.0, 0.7, 1.3, LinearKernel::Oho);
        let s = Matrix2::new(0.5, 0.0, 0.0, 1.0);
        let r = t * s * t.transpose() + q - s;
        assert!(r.norm() < 1e-14);
    }

    #[test]
    fn ubu_continuum_limit() {
        let m = lyapunov_oracle(&[1.0], &[0.0], 1e-3, 1.0, LinearKernel::Ubu).unwrap();
        assert!((m.var_x[0] - 1.0).abs() < 1e-3);
        assert!((m.var_v[0] - 1.0).abs() < 1e-3);
    }

    #[test]
    fn ubu_bias_below_em() {
        let u = lyapunov_oracle(&[1.0], &[0.0], 0.2, 2.0, LinearKernel::Ubu).unwrap();
        let e = lyapunov_oracle(&[1.0], &[0.0], 0.2, 2.0, LinearKernel::Em).unwrap();
        assert!((u.var_x[0] - 1.0).abs() < (e.var_x[0] - 1.0).abs());
    }

    #[test]
    fn em_fixed_point_residual() {
        let (h, g) = (0.1, 1.0);
        let m = lyapunov_oracle(&[1.0], &[0.0], h, g, LinearKernel::Em).unwrap();
        let (t, q) = mode_kernel(1.0, h, g, LinearKernel::Em);
        let s = Matrix2::new(m.var_x[0], m.cov_xv[0], m.cov_xv[0], m.var_v[0]);
        assert!((t * s * t.transpose() + q - s).norm() < 1e-12);
    }

    #[test]
    fn unstable_rejected() {
        assert!(matches!(
            lyapunov_oracle(&[100.0], &[0.0], 1.0, 1.0, LinearKernel::Em),
            Err(Error::Unstable(_))
        ));
    }

    #[test]
    fn chi_square_uniform() {
        let (s, p) = chi_square_test(&[100, 100, 100, 100], &[0.25; 4]).unwrap();
        assert_eq!(s, 0.0);
        assert!((p - 1.0).abs() < 1e-12);
        let (_, p) = chi_square_test(&[400, 0, 0, 0], &[0.25; 4]).unwrap();
        assert!(p < 1e-10);
    }
}
