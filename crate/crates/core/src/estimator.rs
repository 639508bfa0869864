//! Randomized level schedule, difference statistics, and the debiased
//! estimators `S` and `S(c_R)`.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::{GradientMode, RunConfig};
use crate::couplings::{
    collect_pairs, gaussian_state, initial_state, joint_tail_coupling, run_levels, KernelKind, LevelPlan,
    LevelStart, NoiseTree, RunKeys, StepContext,
};
use crate::error::{Error, Result};
use crate::inexact::WorkLedger;
use crate::models::{GaussianApprox, Potential};
use crate::noise::{derive_seed, uniform, NoiseKey, Stream};
use crate::observables::TestFunctionSet;
use crate::state::PhaseState;

const REL_TOL: f64 = 1e-9;
const TAIL_MASS: f64 = 1e-12;

/// Realized numbers of coupled pairs per level.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LevelSchedule {
    pub n: usize,
    pub c_n: f64,
    pub phi_n: f64,
    /// `L(N)`: the first level with `c_{l,l+1} N ≤ 1`.
    pub big_l: u32,
    /// `N_{l,l+1}` for `l = 0..counts.len()`; levels beyond are zero.
    pub counts: Vec<u32>,
}

impl LevelSchedule {
    /// `c_{l,l+1} N`.
    pub fn rate(&self, level: u32) -> f64 {
        self.c_n * self.n as f64 * self.phi_n.powi(-(level as i32))
    }

    /// `E[N_{l,l+1}]`.
    pub fn expected(&self, level: u32) -> f64 {
        if level <= self.big_l {
            f64::from(self.count(level))
        } else {
            self.rate(level)
        }
    }

    pub fn count(&self, level: u32) -> u32 {
        self.counts.get(level as usize).copied().unwrap_or(0)
    }

    /// Largest level with a nonzero count.
    pub fn l_max(&self) -> u32 {
        self.counts.iter().rposition(|&c| c > 0).unwrap_or(0) as u32
    }

    /// Levels above `L(N)` whose Bernoulli draw succeeded.
    pub fn tail_levels(&self) -> Vec<u32> {
        (self.big_l + 1..self.counts.len() as u32).filter(|&l| self.count(l) == 1).collect()
    }
}

/// Draws the level schedule; Bernoulli levels are enumerated until the
/// remaining success mass falls below `1e-12`.
pub fn make_schedule(n: usize, c_n: f64, phi_n: f64, key: NoiseKey) -> Result<LevelSchedule> {
    if n < 1 {
        return Err(Error::config("n", "must be at least 1"));
    }
    if !(c_n > 0.0 && c_n.is_finite()) {
        return Err(Error::config("c_n", format!("must be positive, got {c_n}")));
    }
    if !(phi_n > 2.0 && phi_n.is_finite()) {
        return Err(Error::config("phi_n", format!("must exceed 2, got {phi_n}")));
    }
    let mut s = LevelSchedule {
        n,
        c_n,
        phi_n,
        big_l: 0,
        counts: Vec::new(),
    };
    let mut l = 0u32;
    loop {
        let r = s.rate(l);
        if r <= 1.0 + REL_TOL {
            break;
        }
        s.counts.push((r * (1.0 - REL_TOL)).ceil() as u32);
        l += 1;
    }
    s.big_l = l;
    s.counts.push(1);
    loop {
        l += 1;
        let p = s.rate(l);
        if p * phi_n / (phi_n - 1.0) < TAIL_MASS {
            break;
        }
        s.counts.push(u32::from(uniform(key.level(l)) < p));
    }
    while s.counts.len() > s.big_l as usize + 1 && s.counts.last() == Some(&0) {
        s.counts.pop();
    }
    Ok(s)
}

/// `(1/K) Σ f(z_i)` for every function in the set.
pub fn d0(samples: &[PhaseState], fset: &TestFunctionSet) -> Result<Vec<f64>> {
    if samples.is_empty() {
        return Err(Error::InvalidInput("need at least one sample".into()));
    }
    let mut acc = vec![0.0; fset.len()];
    for z in samples {
        fset.accumulate(&z.x, &mut acc);
    }
    finish_mean(acc, samples.len(), "level-0 average")
}

/// `(1/K) Σ [f(z'_i) − f(z_i)]` with `z'` the fine samples.
pub fn d_llp1(coarse: &[PhaseState], fine: &[PhaseState], fset: &TestFunctionSet) -> Result<Vec<f64>> {
    if coarse.is_empty() || coarse.len() != fine.len() {
        return Err(Error::InvalidInput(format!(
            "need matching nonempty sample sets, got {} and {}",
            coarse.len(),
            fine.len()
        )));
    }
    let mut acc = vec![0.0; fset.len()];
    let mut neg = vec![0.0; fset.len()];
    for (c, f) in coarse.iter().zip(fine) {
        fset.accumulate(&f.x, &mut acc);
        fset.accumulate(&c.x, &mut neg);
    }
    for (a, b) in acc.iter_mut().zip(&neg) {
        *a -= b;
    }
    finish_mean(acc, coarse.len(), "level difference")
}

fn finish_mean(mut acc: Vec<f64>, k: usize, what: &str) -> Result<Vec<f64>> {
    for a in acc.iter_mut() {
        *a /= k as f64;
    }
    if acc.iter().all(|a| a.is_finite()) {
        Ok(acc)
    } else {
        Err(Error::non_finite(what.to_string()))
    }
}

/// `D` samples of one pairwise level `l < L(N)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LevelSamples {
    pub level: u32,
    /// `[replicate][function]`.
    pub d: Vec<Vec<f64>>,
    pub work: WorkLedger,
}

/// Single tail difference `D^{(1)}_{l,l+1}` for `l = L(N)` or a realized `l > L(N)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TailTerm {
    pub level: u32,
    pub d: Vec<f64>,
}

/// Components of `S(c_R)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Assembled {
    pub s0: Vec<f64>,
    /// `S_{l,l+1}` for `l < L(N)`.
    pub s_pairs: Vec<Vec<f64>>,
    /// `D_{L,L+1}/(1−c_R) + Σ_{l>L} S̄_{l,l+1}`.
    pub s_tail: Vec<f64>,
    pub estimate: Vec<f64>,
}

/// Assembles `S(c_R)`; `tail[0]` must be the `L(N)` term.
pub fn assemble_s(
    schedule: &LevelSchedule,
    d0: &[Vec<f64>],
    pairs: &[LevelSamples],
    tail: &[TailTerm],
    c_r: f64,
) -> Result<Assembled> {
    let c_r_max = schedule.phi_n.powf(-0.5);
    if !(c_r >= 0.0 && c_r < c_r_max) {
        return Err(Error::config("c_r", format!("must lie in [0, {c_r_max:.6}), got {c_r}")));
    }
    let nf = d0.first().map(Vec::len).ok_or_else(|| Error::InvalidInput("no level-0 samples".into()))?;
    let mean = |rows: &[Vec<f64>]| -> Vec<f64> {
        let mut m = vec![0.0; nf];
        for r in rows {
            for (a, b) in m.iter_mut().zip(r) {
                *a += b;
            }
        }
        m.iter().map(|a| a / rows.len() as f64).collect()
    };
    let s0 = mean(d0);
    if pairs.len() != schedule.big_l as usize {
        return Err(Error::InvalidInput(format!(
            "expected {} pairwise levels, got {}",
            schedule.big_l,
            pairs.len()
        )));
    }
    let mut s_pairs = Vec::with_capacity(pairs.len());
    for (l, p) in pairs.iter().enumerate() {
        if p.level != l as u32 || p.d.len() != schedule.count(p.level) as usize {
            return Err(Error::InvalidInput(format!("pairwise level {l} does not match the schedule")));
        }
        s_pairs.push(mean(&p.d));
    }
    let first = tail
        .first()
        .filter(|t| t.level == schedule.big_l)
        .ok_or_else(|| Error::InvalidInput("missing the L(N) tail term".into()))?;
    let mut s_tail: Vec<f64> = first.d.iter().map(|d| d / (1.0 - c_r)).collect();
    for t in &tail[1..] {
        if t.level <= schedule.big_l || schedule.count(t.level) != 1 {
            return Err(Error::InvalidInput(format!("tail level {} was not realized", t.level)));
        }
        let e = schedule.expected(t.level);
        let w = c_r.powi((t.level - schedule.big_l) as i32);
        for ((s, d), dl) in s_tail.iter_mut().zip(&t.d).zip(&first.d) {
            *s += (d - dl * w) / e;
        }
    }
    let mut estimate = s0.clone();
    for sp in &s_pairs {
        for (e, v) in estimate.iter_mut().zip(sp) {
            *e += v;
        }
    }
    for (e, v) in estimate.iter_mut().zip(&s_tail) {
        *e += v;
    }
    Ok(Assembled {
        s0,
        s_pairs,
        s_tail,
        estimate,
    })
}

/// Result of one debiased estimator run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimatorReport {
    pub mode: GradientMode,
    pub names: Vec<String>,
    pub c_r: f64,
    pub n_data: usize,
    pub schedule: LevelSchedule,
    /// Level-0 averages `[replicate][function]`.
    pub d0: Vec<Vec<f64>>,
    pub pairs: Vec<LevelSamples>,
    pub tail: Vec<TailTerm>,
    pub components: Assembled,
    pub work_level0: WorkLedger,
    pub work_tail: WorkLedger,
    pub work: WorkLedger,
}

impl EstimatorReport {
    pub fn estimate(&self) -> &[f64] {
        &self.components.estimate
    }

    /// Recomputes `S(c)` from the stored differences.
    pub fn reassemble(&self, c_r: f64) -> Result<Assembled> {
        assemble_s(&self.schedule, &self.d0, &self.pairs, &self.tail, c_r)
    }

    /// Total work in full-data passes.
    pub fn passes(&self) -> f64 {
        self.work.passes(self.n_data)
    }

    /// Work in full-data passes with anchor refreshes left out.
    pub fn passes_excluding_anchors(&self) -> f64 {
        self.work.passes_excluding_anchors(self.n_data)
    }
}

/// Exact-gradient debiased UBU.
pub fn run_ububu<P: Potential + ?Sized>(
    p: &P,
    approx: &GaussianApprox,
    cfg: &RunConfig,
    fset: &TestFunctionSet,
) -> Result<EstimatorReport> {
    require_mode(cfg, GradientMode::Exact)?;
    run_estimator(p, approx, cfg, fset)
}

/// Debiased UBU with SVRG gradients.
pub fn run_ububu_sg<P: Potential + ?Sized>(
    p: &P,
    approx: &GaussianApprox,
    cfg: &RunConfig,
    fset: &TestFunctionSet,
) -> Result<EstimatorReport> {
    require_mode(cfg, GradientMode::Svrg)?;
    run_estimator(p, approx, cfg, fset)
}

/// Debiased UBU with quadratic approximate gradients.
pub fn run_ububu_approx<P: Potential + ?Sized>(
    p: &P,
    approx: &GaussianApprox,
    cfg: &RunConfig,
    fset: &TestFunctionSet,
) -> Result<EstimatorReport> {
    require_mode(cfg, GradientMode::Approx)?;
    run_estimator(p, approx, cfg, fset)
}

fn require_mode(cfg: &RunConfig, mode: GradientMode) -> Result<()> {
    if cfg.gradient_mode == mode {
        Ok(())
    } else {
        Err(Error::config(
            "gradient_mode",
            format!("expected {mode:?}, got {:?}", cfg.gradient_mode),
        ))
    }
}

/// Key namespace of pairwise level `l`, replicate `r`.
pub fn pair_keys(seed: u64, level: u32, replicate: u64) -> RunKeys {
    RunKeys::new(NoiseKey::new(derive_seed(seed, u64::from(level)), Stream::Pair).replicate(replicate))
}

pub fn tail_keys(seed: u64) -> RunKeys {
    RunKeys::new(NoiseKey::new(seed, Stream::Tail))
}

pub fn level0_keys(seed: u64, replicate: u64) -> RunKeys {
    RunKeys::new(NoiseKey::new(seed, Stream::Level0).replicate(replicate))
}

/// Runs the estimator in the mode given by `cfg.gradient_mode`.
///
/// `approx` is the Gaussian approximation `μ_G` (its center doubles as the
/// MAP start of exact mode).
pub fn run_estimator<P: Potential + ?Sized>(
    p: &P,
    approx: &GaussianApprox,
    cfg: &RunConfig,
    fset: &TestFunctionSet,
) -> Result<EstimatorReport> {
    cfg.validate()?;
    if approx.dim() != p.dim() {
        return Err(Error::DimensionMismatch {
            expected: p.dim(),
            got: approx.dim(),
        });
    }
    if fset.is_empty() {
        return Err(Error::InvalidInput("no test functions".into()));
    }
    if cfg.gradient_mode == GradientMode::Svrg && p.n_data() == 0 {
        return Err(Error::config("gradient_mode", "svrg needs a potential with data terms"));
    }
    let schedule = make_schedule(cfg.n, cfg.c_n, cfg.phi_n, NoiseKey::new(cfg.seed, Stream::Schedule))?;

    let level0: Vec<(Vec<f64>, WorkLedger)> = (0..cfg.n as u64)
        .into_par_iter()
        .map(|r| level0_replicate(p, approx, cfg, fset, r))
        .collect::<Result<_>>()?;
    let mut work_level0 = WorkLedger::default();
    let d0: Vec<Vec<f64>> = level0
        .into_iter()
        .map(|(d, w)| {
            work_level0.add(&w);
            d
        })
        .collect();

    let mut pairs = Vec::with_capacity(schedule.big_l as usize);
    for l in 0..schedule.big_l {
        let reps: Vec<(Vec<f64>, WorkLedger)> = (0..u64::from(schedule.count(l)))
            .into_par_iter()
            .map(|r| {
                let keys = pair_keys(cfg.seed, l, r);
                let (s, w) = collect_pairs(p, approx, cfg, l, &keys)?;
                let d = d_llp1(&s.coarse, &s.fine, fset).map_err(|e| with_context(e, l, Some(r)))?;
                Ok((d, w))
            })
            .collect::<Result<_>>()?;
        let mut work = WorkLedger::default();
        let d = reps
            .into_iter()
            .map(|(d, w)| {
                work.add(&w);
                d
            })
            .collect();
        pairs.push(LevelSamples { level: l, d, work });
    }

    let big_l = schedule.big_l;
    let top = schedule.l_max().max(big_l) + 1;
    let nlev = (top - big_l + 1) as usize;
    let mut sums = vec![vec![0.0; fset.len()]; nlev];
    let chains = joint_tail_coupling(p, approx, cfg, &tail_keys(cfg.seed), big_l..=top, |l, _, z| {
        fset.accumulate(&z.x, &mut sums[(l - big_l) as usize]);
    })?;
    let mut work_tail = WorkLedger::default();
    for c in &chains {
        work_tail.add(&c.ledger);
    }
    let tail_d = |l: u32| -> Result<Vec<f64>> {
        let i = (l - big_l) as usize;
        let d: Vec<f64> = sums[i + 1].iter().zip(&sums[i]).map(|(f, c)| (f - c) / cfg.k as f64).collect();
        if d.iter().all(|v| v.is_finite()) {
            Ok(d)
        } else {
            Err(Error::non_finite(format!("tail difference at level {l}")))
        }
    };
    let mut tail = vec![TailTerm {
        level: big_l,
        d: tail_d(big_l)?,
    }];
    for l in schedule.tail_levels() {
        tail.push(TailTerm { level: l, d: tail_d(l)? });
    }

    let components = assemble_s(&schedule, &d0, &pairs, &tail, cfg.c_r)?;
    if components.estimate.iter().any(|v| !v.is_finite()) {
        return Err(Error::non_finite("estimate"));
    }
    let mut work = work_level0;
    for pl in &pairs {
        work.add(&pl.work);
    }
    work.add(&work_tail);
    Ok(EstimatorReport {
        mode: cfg.gradient_mode,
        names: fset.names().to_vec(),
        c_r: cfg.c_r,
        n_data: p.n_data(),
        schedule,
        d0,
        pairs,
        tail,
        components,
        work_level0,
        work_tail,
        work,
    })
}

fn with_context(e: Error, level: u32, replicate: Option<u64>) -> Error {
    match e {
        Error::NonFinite { context } => Error::non_finite(match replicate {
            Some(r) => format!("{context} (level {level}, replicate {r})"),
            None => format!("{context} (level {level})"),
        }),
        other => other,
    }
}

fn level0_replicate<P: Potential + ?Sized>(
    p: &P,
    approx: &GaussianApprox,
    cfg: &RunConfig,
    fset: &TestFunctionSet,
    r: u64,
) -> Result<(Vec<f64>, WorkLedger)> {
    let mut acc = vec![0.0; fset.len()];
    match cfg.gradient_mode {
        GradientMode::Exact => {
            let keys = level0_keys(cfg.seed, r);
            let tree = NoiseTree {
                base: keys.noise,
                finest: 0,
                dim: p.dim(),
                h0: cfg.h0,
                gamma: cfg.gamma,
            };
            let plan = [LevelPlan {
                level: 0,
                start: -(cfg.b0 as i64),
                gradient_from: i64::MIN,
                init: LevelStart::State(initial_state(approx, cfg, keys.init, 0)),
            }];
            let ctx = StepContext::new(p, approx, cfg.gamma);
            let chains = run_levels(&ctx, KernelKind::Exact, cfg, &tree, None, &plan, |_, _, z| {
                fset.accumulate(&z.x, &mut acc)
            })
            .map_err(|e| with_context(e, 0, Some(r)))?;
            let d = finish_mean(acc, cfg.k, "level-0 average").map_err(|e| with_context(e, 0, Some(r)))?;
            Ok((d, chains[0].ledger))
        }
        GradientMode::Svrg | GradientMode::Approx => {
            let key = NoiseKey::new(cfg.seed, Stream::GaussLevel0).replicate(r);
            for i in 0..cfg.k {
                let z = gaussian_state(approx, key.slot(i as u32));
                fset.accumulate(&z.x, &mut acc);
            }
            let d = finish_mean(acc, cfg.k, "level-0 average").map_err(|e| with_context(e, 0, Some(r)))?;
            Ok((d, WorkLedger::default()))
        }
    }
}
