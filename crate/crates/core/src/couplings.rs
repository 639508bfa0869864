//! Couplings between stepsize levels.
//!
//! A level-`l` chain takes steps of size `h_l = h0 / 2^l`; its step `j`
//! covers diffusion time `[j h_l, (j+1) h_l]`. Fine noise is drawn once at
//! the finest level and coarsened with [`m_transform`], so every adjacent
//! pair of levels is driven by the same Brownian path. Time is organized in
//! windows of length `h0` (one step of each level's coarse kernel
//! `R_l = P_{h_l}^{2^l}`); windows `< 0` are burn-in and window `w ≥ 0`
//! produces sample `w`.

use crate::config::{GradientMode, RunConfig};
use crate::error::{Error, Result};
use crate::inexact::{approx_ubu_step, svrg_ubu_step, AnchorState, WorkLedger};
use crate::integrators::{oho_step, ubu_step, OUStepCoeffs, Octet, Quad};
use crate::models::{GaussianApprox, Potential};
use crate::noise::{coin, draw_batch, fill_gaussians, NoiseKey};
use crate::state::PhaseState;

/// Merges two OU steps of duration `s` into one of duration `2s`.
///
/// Returns `(ξ1', ξ2')` with `U(U(z, s, ξ1, ξ2), s, ξ3, ξ4) = U(z, 2s, ξ1', ξ2')`.
pub fn m_transform(xi: &Quad, gamma: f64, s: f64) -> Result<(Vec<f64>, Vec<f64>)> {
    let c = OUStepCoeffs::new(gamma, s);
    let c2s = OUStepCoeffs::new(gamma, 2.0 * s);
    if !(s > 0.0) || !(c2s.c2 > f64::MIN_POSITIVE) {
        return Err(Error::Degenerate(format!(
            "noise merge needs a positive duration with nondegenerate OU integral (s = {s})"
        )));
    }
    let d = xi[0].len();
    let mut a = vec![0.0; d];
    let mut b = vec![0.0; d];
    let r2 = std::f64::consts::FRAC_1_SQRT_2;
    for k in 0..d {
        a[k] = (xi[0][k] + xi[2][k]) * r2;
        let ou = c.eta * (c.c1 * xi[0][k] + c.c2 * xi[1][k]) + c.c1 * xi[2][k] + c.c2 * xi[3][k];
        b[k] = (ou - c2s.c1 * a[k]) / c2s.c2;
    }
    Ok((a, b))
}

/// Coarse quadruple for one step of size `h` from the fine octet of two `h/2` steps.
pub fn coarsen(octet: &Octet, gamma: f64, h: f64) -> Result<Quad> {
    let s = h / 4.0;
    let (a1, a2) = m_transform(&octet[0], gamma, s)?;
    let (b1, b2) = m_transform(&octet[1], gamma, s)?;
    Ok([a1, a2, b1, b2])
}

/// Two chains at stepsizes `h` (coarse) and `h/2` (fine) with their anchors.
#[derive(Debug, Clone, PartialEq)]
pub struct CoupledPair {
    pub coarse: PhaseState,
    pub fine: PhaseState,
    pub coarse_anchor: AnchorState,
    pub fine_anchor: AnchorState,
}

impl CoupledPair {
    pub fn new(coarse: PhaseState, fine: PhaseState, tau: usize) -> Self {
        CoupledPair {
            coarse,
            fine,
            coarse_anchor: AnchorState::new(tau),
            fine_anchor: AnchorState::new(tau),
        }
    }
}

/// Which one-step kernel a chain applies.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum KernelKind {
    Exact,
    Svrg,
    Approx,
    Oho,
}

impl From<GradientMode> for KernelKind {
    fn from(m: GradientMode) -> Self {
        match m {
            GradientMode::Exact => KernelKind::Exact,
            GradientMode::Svrg => KernelKind::Svrg,
            GradientMode::Approx => KernelKind::Approx,
        }
    }
}

/// Inexact gradient family used by the fine chain of an OHO/fine coupling.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InexactKind {
    Svrg,
    Approx,
}

/// Shared read-only context of a chain step.
pub struct StepContext<'a, P: ?Sized> {
    pub potential: &'a P,
    pub approx: Option<&'a GaussianApprox>,
    pub gamma: f64,
}

impl<'a, P: Potential + ?Sized> StepContext<'a, P> {
    pub fn new(potential: &'a P, approx: &'a GaussianApprox, gamma: f64) -> Self {
        StepContext {
            potential,
            approx: Some(approx),
            gamma,
        }
    }

    /// Context for exact-gradient steps only.
    pub fn exact(potential: &'a P, gamma: f64) -> Self {
        StepContext {
            potential,
            approx: None,
            gamma,
        }
    }

    fn approx(&self) -> Result<&'a GaussianApprox> {
        self.approx
            .ok_or_else(|| Error::InvalidInput("kernel needs a Gaussian approximation".into()))
    }

    #[allow(clippy::too_many_arguments)]
    pub fn step(
        &self,
        kind: KernelKind,
        z: &mut PhaseState,
        anchor: &mut AnchorState,
        h: f64,
        xi: &Quad,
        batch: &[usize],
        ledger: &mut WorkLedger,
    ) -> Result<()> {
        match kind {
            KernelKind::Exact => {
                ubu_step(self.potential, z, h, self.gamma, xi)?;
                ledger.record_full(self.potential.n_data());
            }
            KernelKind::Svrg => {
                svrg_ubu_step(self.potential, z, anchor, h, self.gamma, batch, xi, ledger)?;
            }
            KernelKind::Approx => {
                approx_ubu_step(self.potential, self.approx()?, z, anchor, h, self.gamma, xi, ledger)?;
            }
            KernelKind::Oho => oho_step(self.approx()?, z, h, self.gamma, xi)?,
        }
        Ok(())
    }
}

/// Fine chain: two UBU(h/2) steps on the octet; coarse chain: one UBU(h)
/// step on the coarsened octet.
pub fn coupled_ubu_step<P: Potential + ?Sized>(
    p: &P,
    pair: &mut CoupledPair,
    h: f64,
    gamma: f64,
    octet: &Octet,
    ledger: &mut WorkLedger,
) -> Result<()> {
    let ctx = StepContext::exact(p, gamma);
    coupled_step(&ctx, KernelKind::Exact, KernelKind::Exact, pair, h, octet, [&[], &[]], &[], ledger)
}

/// SVRG coupling; the coarse batch is `batch_half` when `coin` is true and
/// `batch_full` otherwise.
#[allow(clippy::too_many_arguments)]
pub fn coupled_svrg_step<P: Potential + ?Sized>(
    p: &P,
    approx: &GaussianApprox,
    pair: &mut CoupledPair,
    h: f64,
    gamma: f64,
    octet: &Octet,
    batch_half: &[usize],
    batch_full: &[usize],
    coin: bool,
    ledger: &mut WorkLedger,
) -> Result<()> {
    let ctx = StepContext::new(p, approx, gamma);
    let coarse_batch = if coin { batch_half } else { batch_full };
    coupled_step(
        &ctx,
        KernelKind::Svrg,
        KernelKind::Svrg,
        pair,
        h,
        octet,
        [batch_half, batch_full],
        coarse_batch,
        ledger,
    )
}

/// Coarse chain: OHO(h) on the Gaussian approximation; fine chain: two
/// inexact UBU(h/2) steps.
#[allow(clippy::too_many_arguments)]
pub fn coupled_oho_fine_step<P: Potential + ?Sized>(
    kind: InexactKind,
    p: &P,
    approx: &GaussianApprox,
    pair: &mut CoupledPair,
    h: f64,
    gamma: f64,
    octet: &Octet,
    batches: [&[usize]; 2],
    ledger: &mut WorkLedger,
) -> Result<()> {
    let ctx = StepContext::new(p, approx, gamma);
    let fine = match kind {
        InexactKind::Svrg => KernelKind::Svrg,
        InexactKind::Approx => KernelKind::Approx,
    };
    coupled_step(&ctx, KernelKind::Oho, fine, pair, h, octet, batches, &[], ledger)
}

/// Quadratic-approximate-gradient coupling.
pub fn coupled_approx_step<P: Potential + ?Sized>(
    p: &P,
    approx: &GaussianApprox,
    pair: &mut CoupledPair,
    h: f64,
    gamma: f64,
    octet: &Octet,
    ledger: &mut WorkLedger,
) -> Result<()> {
    let ctx = StepContext::new(p, approx, gamma);
    coupled_step(&ctx, KernelKind::Approx, KernelKind::Approx, pair, h, octet, [&[], &[]], &[], ledger)
}

#[allow(clippy::too_many_arguments)]
fn coupled_step<P: Potential + ?Sized>(
    ctx: &StepContext<'_, P>,
    coarse_kind: KernelKind,
    fine_kind: KernelKind,
    pair: &mut CoupledPair,
    h: f64,
    octet: &Octet,
    fine_batches: [&[usize]; 2],
    coarse_batch: &[usize],
    ledger: &mut WorkLedger,
) -> Result<()> {
    if !(h > 0.0) {
        return Err(Error::InvalidInput(format!("stepsize must be positive, got {h}")));
    }
    for (q, b) in octet.iter().zip(fine_batches) {
        ctx.step(fine_kind, &mut pair.fine, &mut pair.fine_anchor, h / 2.0, q, b, ledger)?;
    }
    let cq = coarsen(octet, ctx.gamma, h)?;
    ctx.step(coarse_kind, &mut pair.coarse, &mut pair.coarse_anchor, h, &cq, coarse_batch, ledger)
}

/// Gaussian quadruples addressed by `(level, step)`.
///
/// Only the finest level is drawn; coarser quadruples are obtained by
/// recursive coarsening.
#[derive(Debug, Clone, Copy)]
pub struct NoiseTree {
    pub base: NoiseKey,
    pub finest: u32,
    pub dim: usize,
    pub h0: f64,
    pub gamma: f64,
}

impl NoiseTree {
    pub fn h(&self, level: u32) -> f64 {
        self.h0 / 2f64.powi(level as i32)
    }

    pub fn finest_quad(&self, step: i64) -> Quad {
        let key = self.base.level(self.finest).step(step);
        std::array::from_fn(|s| {
            let mut v = vec![0.0; self.dim];
            fill_gaussians(key.slot(s as u32), &mut v);
            v
        })
    }

    /// Quadruple for `step` of `level`.
    pub fn quad(&self, level: u32, step: i64) -> Result<Quad> {
        if level > self.finest {
            return Err(Error::InvalidInput(format!(
                "level {level} is finer than the tree's finest level {}",
                self.finest
            )));
        }
        if level == self.finest {
            return Ok(self.finest_quad(step));
        }
        let octet = [self.quad(level + 1, 2 * step)?, self.quad(level + 1, 2 * step + 1)?];
        coarsen(&octet, self.gamma, self.h(level))
    }

    /// All quadruples of window `w` for levels `coarsest..=finest`, indexed
    /// by `level - coarsest`; each level's quadruples are coarsened from the
    /// next finer level's, which doubles as the cache.
    pub fn window(&self, w: i64, coarsest: u32) -> Result<Vec<Vec<Quad>>> {
        let n = 1i64 << self.finest;
        let mut levels = vec![(0..n).map(|j| self.finest_quad(w * n + j)).collect::<Vec<_>>()];
        for level in (coarsest..self.finest).rev() {
            let finer = levels.last().unwrap();
            let mut cur = Vec::with_capacity(finer.len() / 2);
            for pair in finer.chunks(2) {
                let octet = [pair[0].clone(), pair[1].clone()];
                cur.push(coarsen(&octet, self.gamma, self.h(level))?);
            }
            levels.push(cur);
        }
        levels.reverse();
        Ok(levels)
    }
}

/// Minibatches addressed by `(level, step)`; a coarse batch is one of the two
/// finer batches it spans, chosen by a fair coin.
#[derive(Debug, Clone, Copy)]
pub struct OmegaTree {
    pub batch_key: NoiseKey,
    pub coin_key: NoiseKey,
    pub finest: u32,
    pub n_data: usize,
    pub n_b: usize,
}

impl OmegaTree {
    /// `true` selects the first of the two finer batches.
    pub fn coin(&self, level: u32, step: i64) -> bool {
        coin(self.coin_key.level(level).step(step))
    }

    pub fn batch(&self, level: u32, step: i64) -> Vec<usize> {
        if level >= self.finest {
            return draw_batch(self.batch_key.level(self.finest).step(step), self.n_data, self.n_b);
        }
        let child = if self.coin(level, step) { 2 * step } else { 2 * step + 1 };
        self.batch(level + 1, child)
    }

    pub fn window(&self, w: i64, coarsest: u32) -> Vec<Vec<Vec<usize>>> {
        let n = 1i64 << self.finest;
        let mut levels = vec![(0..n).map(|j| self.batch(self.finest, w * n + j)).collect::<Vec<_>>()];
        for level in (coarsest..self.finest).rev() {
            let finer = levels.last().unwrap();
            let base = w * (1i64 << level);
            let cur = (0..finer.len() / 2)
                .map(|j| {
                    if self.coin(level, base + j as i64) {
                        finer[2 * j].clone()
                    } else {
                        finer[2 * j + 1].clone()
                    }
                })
                .collect();
            levels.push(cur);
        }
        levels.reverse();
        levels
    }
}

/// Key namespace of one coupled run: noise, batches, coins, and initial states.
#[derive(Debug, Clone, Copy)]
pub struct RunKeys {
    pub noise: NoiseKey,
    pub batch: NoiseKey,
    pub coin: NoiseKey,
    pub init: NoiseKey,
}

impl RunKeys {
    pub fn new(base: NoiseKey) -> Self {
        use crate::noise::Stream;
        RunKeys {
            noise: base,
            batch: base.stream(Stream::Batch).slot(u32::from(base.stream as u16)),
            coin: base.stream(Stream::Coin).slot(u32::from(base.stream as u16)),
            init: base.stream(Stream::Init).slot(u32::from(base.stream as u16)),
        }
    }

    pub fn noise_tree(&self, finest: u32, dim: usize, cfg: &RunConfig) -> NoiseTree {
        NoiseTree {
            base: self.noise,
            finest,
            dim,
            h0: cfg.h0,
            gamma: cfg.gamma,
        }
    }

    pub fn omega_tree(&self, finest: u32, n_data: usize, cfg: &RunConfig) -> OmegaTree {
        OmegaTree {
            batch_key: self.batch,
            coin_key: self.coin,
            finest,
            n_data: n_data.max(1),
            n_b: cfg.n_b.max(1),
        }
    }
}

/// Exact-mode start: `μ0` draw for the chain at `level`.
pub fn initial_state(approx: &GaussianApprox, cfg: &RunConfig, key: NoiseKey, level: u32) -> PhaseState {
    use crate::config::InitDistribution;
    let d = approx.dim();
    let key = key.level(level);
    let x = match cfg.init {
        InitDistribution::MapDirac => approx.center().to_vec(),
        InitDistribution::GaussianApprox => approx.sample_position(key.step(1)),
    };
    let mut v = vec![0.0; d];
    fill_gaussians(key.step(0), &mut v);
    PhaseState { x, v }
}

/// Draw from `μ_G`.
pub fn gaussian_state(approx: &GaussianApprox, key: NoiseKey) -> PhaseState {
    let x = approx.sample_position(key.step(-1));
    let mut v = vec![0.0; approx.dim()];
    fill_gaussians(key.step(-2), &mut v);
    PhaseState { x, v }
}

/// Paired samples of a two-level run, recorded at the coarse-kernel cadence.
#[derive(Debug, Clone, Default)]
pub struct PairedSamples {
    pub coarse: Vec<PhaseState>,
    pub fine: Vec<PhaseState>,
}

fn check_level_config(cfg: &RunConfig) -> Result<()> {
    cfg.validate()
}

/// Exact-gradient `ν_{l,l+1}`: independent `μ0` starts, the fine chain runs
/// alone for `B_{l+1} − B_l` windows, then both run coupled for `B_l + K`.
///
/// `record(i, coarse, fine)` is called after each recorded window.
#[allow(clippy::too_many_arguments)]
pub fn run_nu_llp1<P, F>(
    p: &P,
    approx: &GaussianApprox,
    cfg: &RunConfig,
    level: u32,
    keys: &RunKeys,
    ledger: &mut WorkLedger,
    mut record: F,
) -> Result<()>
where
    P: Potential + ?Sized,
    F: FnMut(usize, &PhaseState, &PhaseState),
{
    check_level_config(cfg)?;
    let tree = keys.noise_tree(level + 1, p.dim(), cfg);
    let bl = cfg.burn_in(level) as i64;
    let bl1 = cfg.burn_in(level + 1) as i64;
    let coarse = initial_state(approx, cfg, keys.init, level);
    let fine = initial_state(approx, cfg, keys.init, level + 1);
    let mut pair = CoupledPair::new(coarse, fine, cfg.tau);
    let ctx = StepContext::new(p, approx, cfg.gamma);
    let nf = 1i64 << (level + 1);
    let hl = cfg.h(level);
    for w in -bl1..-bl {
        for j in 0..nf {
            let q = tree.finest_quad(w * nf + j);
            ctx.step(KernelKind::Exact, &mut pair.fine, &mut pair.fine_anchor, hl / 2.0, &q, &[], ledger)?;
        }
    }
    let nc = nf / 2;
    for w in -bl..cfg.k as i64 {
        for j in 0..nc {
            let s = 2 * (w * nc + j);
            let octet = [tree.finest_quad(s), tree.finest_quad(s + 1)];
            coupled_step(&ctx, KernelKind::Exact, KernelKind::Exact, &mut pair, hl, &octet, [&[], &[]], &[], ledger)?;
        }
        if w >= 0 {
            check_finite(&pair, level)?;
            record(w as usize, &pair.coarse, &pair.fine);
        }
    }
    Ok(())
}

/// Inexact-gradient `ν_{l,l+1}` (SVRG or approximate): both chains start at
/// `−B_{l+1}` from one shared `μ_G` draw. The coarse chain runs OHO until
/// `−B_l` (throughout for `l = 0`); the fine chain uses inexact UBU throughout.
#[allow(clippy::too_many_arguments)]
pub fn run_nu_llp1_inexact<P, F>(
    kind: InexactKind,
    p: &P,
    approx: &GaussianApprox,
    cfg: &RunConfig,
    level: u32,
    keys: &RunKeys,
    ledger: &mut WorkLedger,
    mut record: F,
) -> Result<()>
where
    P: Potential + ?Sized,
    F: FnMut(usize, &PhaseState, &PhaseState),
{
    check_level_config(cfg)?;
    let finest = level + 1;
    let tree = keys.noise_tree(finest, p.dim(), cfg);
    let omega = keys.omega_tree(finest, p.n_data(), cfg);
    let bl = cfg.burn_in(level) as i64;
    let bl1 = cfg.burn_in(level + 1) as i64;
    let start = gaussian_state(approx, keys.init.level(finest));
    let mut pair = CoupledPair::new(start.clone(), start, cfg.tau);
    let ctx = StepContext::new(p, approx, cfg.gamma);
    let (fine_kind, is_svrg) = match kind {
        InexactKind::Svrg => (KernelKind::Svrg, true),
        InexactKind::Approx => (KernelKind::Approx, false),
    };
    let nc = 1i64 << level;
    let hl = cfg.h(level);
    for w in -bl1..cfg.k as i64 {
        let coarse_kind = if level == 0 || w < -bl { KernelKind::Oho } else { fine_kind };
        for j in 0..nc {
            let cstep = w * nc + j;
            let s = 2 * cstep;
            let octet = [tree.finest_quad(s), tree.finest_quad(s + 1)];
            let (b0, b1, cb) = if is_svrg {
                let b0 = omega.batch(finest, s);
                let b1 = omega.batch(finest, s + 1);
                let cb = if omega.coin(level, cstep) { b0.clone() } else { b1.clone() };
                (b0, b1, cb)
            } else {
                (Vec::new(), Vec::new(), Vec::new())
            };
            coupled_step(&ctx, coarse_kind, fine_kind, &mut pair, hl, &octet, [&b0, &b1], &cb, ledger)?;
        }
        if w >= 0 {
            check_finite(&pair, level)?;
            record(w as usize, &pair.coarse, &pair.fine);
        }
    }
    Ok(())
}

/// Convenience wrapper collecting all recorded pairs.
pub fn collect_pairs<P: Potential + ?Sized>(
    p: &P,
    approx: &GaussianApprox,
    cfg: &RunConfig,
    level: u32,
    keys: &RunKeys,
) -> Result<(PairedSamples, WorkLedger)> {
    let mut out = PairedSamples::default();
    let mut ledger = WorkLedger::default();
    let mut rec = |_: usize, c: &PhaseState, f: &PhaseState| {
        out.coarse.push(c.clone());
        out.fine.push(f.clone());
    };
    match cfg.gradient_mode {
        GradientMode::Exact => run_nu_llp1(p, approx, cfg, level, keys, &mut ledger, &mut rec)?,
        GradientMode::Svrg => {
            run_nu_llp1_inexact(InexactKind::Svrg, p, approx, cfg, level, keys, &mut ledger, &mut rec)?
        }
        GradientMode::Approx => {
            run_nu_llp1_inexact(InexactKind::Approx, p, approx, cfg, level, keys, &mut ledger, &mut rec)?
        }
    }
    Ok((out, ledger))
}

fn check_finite(pair: &CoupledPair, level: u32) -> Result<()> {
    if pair.coarse.is_finite() && pair.fine.is_finite() {
        Ok(())
    } else {
        Err(Error::non_finite(format!("coupled chains at level {level}")))
    }
}

/// Where a level's chain comes from in a multilevel run.
#[derive(Debug, Clone)]
pub enum LevelStart {
    /// Fresh state at the start window.
    State(PhaseState),
    /// Copy of the next finer level's state at the start window.
    CopyFiner,
}

#[derive(Debug, Clone)]
pub struct LevelPlan {
    pub level: u32,
    /// First window the chain is active in.
    pub start: i64,
    /// First window using the gradient kernel; OHO before. `i64::MAX` means never.
    pub gradient_from: i64,
    pub init: LevelStart,
}

/// Per-level final states and work of a multilevel run.
#[derive(Debug, Clone)]
pub struct LevelChain {
    pub level: u32,
    pub state: PhaseState,
    pub anchor: AnchorState,
    pub ledger: WorkLedger,
}

/// Runs chains on consecutive levels `plans[0].level ..= plans.last().level`
/// driven by one noise tree and one omega tree; chains share the common
/// endpoint (window `K − 1`).
///
/// `record(level, i, state)` is called for every level after window `i ≥ 0`.
pub fn run_levels<P, F>(
    ctx: &StepContext<'_, P>,
    mode: KernelKind,
    cfg: &RunConfig,
    tree: &NoiseTree,
    omega: Option<&OmegaTree>,
    plans: &[LevelPlan],
    mut record: F,
) -> Result<Vec<LevelChain>>
where
    P: Potential + ?Sized,
    F: FnMut(u32, usize, &PhaseState),
{
    let coarsest = plans.first().map(|p| p.level).ok_or_else(|| Error::InvalidInput("no levels".into()))?;
    for (i, p) in plans.iter().enumerate() {
        if p.level != coarsest + i as u32 {
            return Err(Error::InvalidInput("levels must be consecutive and ascending".into()));
        }
    }
    if plans.last().unwrap().level != tree.finest {
        return Err(Error::InvalidInput("finest plan level must match the noise tree".into()));
    }
    if matches!(plans.last().unwrap().init, LevelStart::CopyFiner) {
        return Err(Error::InvalidInput("finest level needs an explicit start".into()));
    }
    let mut chains: Vec<Option<LevelChain>> = vec![None; plans.len()];
    let first = plans.iter().map(|p| p.start).min().unwrap();
    for w in first..cfg.k as i64 {
        // Activate finer levels first so a coarser chain can copy a state from
        // the same window boundary.
        for idx in (0..plans.len()).rev() {
            let plan = &plans[idx];
            if plan.start == w && chains[idx].is_none() {
                let state = match &plan.init {
                    LevelStart::State(s) => s.clone(),
                    LevelStart::CopyFiner => chains
                        .get(idx + 1)
                        .and_then(|c| c.as_ref())
                        .map(|c| c.state.clone())
                        .ok_or_else(|| Error::InvalidInput(format!("level {} copies an inactive level", plan.level)))?,
                };
                chains[idx] = Some(LevelChain {
                    level: plan.level,
                    state,
                    anchor: AnchorState::new(cfg.tau),
                    ledger: WorkLedger::default(),
                });
            }
        }
        let active_from = match chains.iter().position(|c| c.is_some()) {
            Some(i) => i,
            None => continue,
        };
        let lo = plans[active_from].level;
        let quads = tree.window(w, lo)?;
        let batches = match (mode, omega) {
            (KernelKind::Svrg, Some(o)) => Some(o.window(w, lo)),
            (KernelKind::Svrg, None) => return Err(Error::InvalidInput("SVRG run needs an omega tree".into())),
            _ => None,
        };
        for idx in active_from..plans.len() {
            let plan = &plans[idx];
            let chain = chains[idx].as_mut().expect("active chain");
            let kind = if w >= plan.gradient_from { mode } else { KernelKind::Oho };
            let h = cfg.h(plan.level);
            let li = (plan.level - lo) as usize;
            for (j, q) in quads[li].iter().enumerate() {
                let b: &[usize] = match &batches {
                    Some(bs) => &bs[li][j],
                    None => &[],
                };
                ctx.step(kind, &mut chain.state, &mut chain.anchor, h, q, b, &mut chain.ledger)?;
            }
            if !chain.state.is_finite() {
                return Err(Error::non_finite(format!("chain at level {} in window {w}", plan.level)));
            }
            if w >= 0 {
                record(plan.level, w as usize, &chain.state);
            }
        }
    }
    chains
        .into_iter()
        .map(|c| c.ok_or_else(|| Error::InvalidInput("a level never started".into())))
        .collect()
}

/// Level plans of the joint tail coupling over `levels`.
///
/// Exact mode: every level starts at `−B_l` from its own `μ0` draw. Inexact
/// modes: the finest level starts at `−B_{finest}` from a `μ_G` draw; each
/// coarser level `l` starts at `−B_{l+1}` from the next finer level's state,
/// runs OHO until `−B_l` (throughout for level 0), then the inexact kernel.
pub fn tail_plans(
    approx: &GaussianApprox,
    cfg: &RunConfig,
    keys: &RunKeys,
    levels: std::ops::RangeInclusive<u32>,
) -> Vec<LevelPlan> {
    let finest = *levels.end();
    levels
        .map(|l| match cfg.gradient_mode {
            GradientMode::Exact => LevelPlan {
                level: l,
                start: -(cfg.burn_in(l) as i64),
                gradient_from: i64::MIN,
                init: LevelStart::State(initial_state(approx, cfg, keys.init, l)),
            },
            _ if l == finest => LevelPlan {
                level: l,
                start: -(cfg.burn_in(l) as i64),
                gradient_from: i64::MIN,
                init: LevelStart::State(gaussian_state(approx, keys.init.level(finest))),
            },
            _ => LevelPlan {
                level: l,
                start: -(cfg.burn_in(l + 1) as i64),
                gradient_from: if l == 0 { i64::MAX } else { -(cfg.burn_in(l) as i64) },
                init: LevelStart::CopyFiner,
            },
        })
        .collect()
}

/// Joint coupling of levels `L..=l_max+1`; returns per-level function
/// averages over the `K` recorded samples and the per-level work.
pub fn joint_tail_coupling<P, F>(
    p: &P,
    approx: &GaussianApprox,
    cfg: &RunConfig,
    keys: &RunKeys,
    levels: std::ops::RangeInclusive<u32>,
    record: F,
) -> Result<Vec<LevelChain>>
where
    P: Potential + ?Sized,
    F: FnMut(u32, usize, &PhaseState),
{
    cfg.validate()?;
    let finest = *levels.end();
    let tree = keys.noise_tree(finest, p.dim(), cfg);
    let omega = keys.omega_tree(finest, p.n_data(), cfg);
    let plans = tail_plans(approx, cfg, keys, levels);
    let ctx = StepContext::new(p, approx, cfg.gamma);
    let omega_ref = (cfg.gradient_mode == GradientMode::Svrg).then_some(&omega);
    run_levels(&ctx, cfg.gradient_mode.into(), cfg, &tree, omega_ref, &plans, record)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::integrators::u_step;
    use crate::models::GaussianTarget;
    use crate::noise::{draw_gaussians, Stream};
    use rand::Rng;

    fn quad(key: NoiseKey, d: usize) -> Quad {
        std::array::from_fn(|i| draw_gaussians(key.slot(i as u32), d))
    }

    #[test]
    fn composition_identity() {
        let mut rng = NoiseKey::new(1, Stream::Scratch).rng();
        for i in 0..1000 {
            let gamma = 0.1 + 4.0 * rng.random::<f64>();
            let s = 10f64.powf(-3.0 + 3.0 * rng.random::<f64>());
            let q = quad(NoiseKey::new(2, Stream::Scratch).step(i), 3);
            let x = draw_gaussians(NoiseKey::new(3, Stream::Scratch).step(i), 3);
            let v = draw_gaussians(NoiseKey::new(4, Stream::Scratch).step(i), 3);
            let z0 = PhaseState { x, v };
            let c = OUStepCoeffs::new(gamma, s);
            let mut a = z0.clone();
            u_step(&mut a, &c, &q[0], &q[1]);
            u_step(&mut a, &c, &q[2], &q[3]);
            let (m1, m2) = m_transform(&q, gamma, s).unwrap();
            let mut b = z0.clone();
            u_step(&mut b, &OUStepCoeffs::new(gamma, 2.0 * s), &m1, &m2);
            let scale = 1.0 + (z0.x.iter().chain(&z0.v).map(|t| t * t).sum::<f64>()).sqrt();
            assert!(a.distance(&b) <= 1e-12 * scale, "case {i}: {}", a.distance(&b));
        }
    }

    #[test]
    fn merged_noise_is_standard() {
        let n = 1_000_000;
        let q = quad(NoiseKey::new(5, Stream::Scratch), n);
        let (a, b) = m_transform(&q, 1.3, 0.2).unwrap();
        let m = |u: &[f64], v: &[f64]| u.iter().zip(v).map(|(x, y)| x * y).sum::<f64>() / n as f64;
        assert!((m(&a, &a) - 1.0).abs() < 0.01);
        assert!((m(&b, &b) - 1.0).abs() < 0.01);
        assert!(m(&a, &b).abs() < 0.01);
    }

    #[test]
    fn brownian_additivity() {
        let e = vec![0.7, -1.2];
        let q = [e.clone(), vec![0.0; 2], e.clone(), vec![0.0; 2]];
        let (a, _) = m_transform(&q, 1.0, 0.3).unwrap();
        for k in 0..2 {
            assert!((a[k] - 2f64.sqrt() * e[k]).abs() < 1e-15);
        }
    }

    #[test]
    fn degenerate_duration_rejected() {
        let q = quad(NoiseKey::new(5, Stream::Scratch), 1);
        assert!(matches!(m_transform(&q, 1.0, 0.0), Err(Error::Degenerate(_))));
    }

    #[test]
    fn tree_coarsening_is_consistent() {
        let tree = NoiseTree {
            base: NoiseKey::new(9, Stream::Tail),
            finest: 3,
            dim: 2,
            h0: 0.5,
            gamma: 1.0,
        };
        for w in [-2i64, 0, 3] {
            let win = tree.window(w, 0).unwrap();
            for l in 0..=3u32 {
                let n = 1i64 << l;
                for j in 0..n {
                    assert_eq!(win[l as usize][j as usize], tree.quad(l, w * n + j).unwrap());
                }
            }
        }
    }

    #[test]
    fn every_tree_level_is_standard_normal() {
        let tree = NoiseTree {
            base: NoiseKey::new(10, Stream::Tail),
            finest: 2,
            dim: 1,
            h0: 0.8,
            gamma: 2.0,
        };
        let n = 40_000;
        let mut acc = [[0.0f64; 4]; 3];
        let mut cross = [0.0f64; 3];
        for w in 0..n {
            let win = tree.window(w, 0).unwrap();
            for l in 0..3 {
                let q = &win[l][0];
                for s in 0..4 {
                    acc[l][s] += q[s][0] * q[s][0];
                }
                cross[l] += q[0][0] * q[1][0];
            }
        }
        for l in 0..3 {
            for s in 0..4 {
                let v = acc[l][s] / n as f64;
                assert!((v - 1.0).abs() < 0.03, "level {l} slot {s}: {v}");
            }
            assert!((cross[l] / n as f64).abs() < 0.03);
        }
    }

    #[test]
    fn omega_coin_frequency() {
        let om = OmegaTree {
            batch_key: NoiseKey::new(1, Stream::Batch),
            coin_key: NoiseKey::new(1, Stream::Coin),
            finest: 1,
            n_data: 1000,
            n_b: 3,
        };
        let n = 100_000;
        let hits = (0..n).filter(|&k| om.batch(0, k) == om.batch(1, 2 * k)).count();
        let f = hits as f64 / n as f64;
        assert!((f - 0.5).abs() < 0.005, "{f}");
        let win = om.window(4, 0);
        assert_eq!(win[0][0], om.batch(0, 4));
    }

    struct Flat(usize);
    impl Potential for Flat {
        fn dim(&self) -> usize {
            self.0
        }
        fn value(&self, _: &[f64]) -> Result<f64> {
            Ok(0.0)
        }
        fn grad(&self, _: &[f64], out: &mut [f64]) -> Result<()> {
            out.iter_mut().for_each(|o| *o = 0.0);
            Ok(())
        }
        fn hessian(&self, _: &[f64]) -> Result<nalgebra::DMatrix<f64>> {
            Ok(nalgebra::DMatrix::zeros(self.0, self.0))
        }
        fn add_grad_component(&self, _: usize, _: &[f64], _: f64, _: &mut [f64]) -> Result<()> {
            Ok(())
        }
    }

    #[test]
    fn flat_potential_pairs_agree() {
        let z = PhaseState::new(vec![0.3, -0.1], vec![1.0, 0.4]).unwrap();
        let mut pair = CoupledPair::new(z.clone(), z, 2);
        let mut led = WorkLedger::default();
        for i in 0..100 {
            let oct = [quad(NoiseKey::new(6, Stream::Scratch).step(2 * i), 2), quad(NoiseKey::new(6, Stream::Scratch).step(2 * i + 1), 2)];
            coupled_ubu_step(&Flat(2), &mut pair, 0.3, 1.5, &oct, &mut led).unwrap();
        }
        assert!(pair.coarse.distance(&pair.fine) < 1e-12 * (1.0 + pair.fine.x[0].abs()));
    }

    #[test]
    fn full_batch_svrg_coupling_matches_exact() {
        let t = GaussianTarget::split(2, 3.0, 5).unwrap();
        let ap = t.gaussian_approx_at(&[0.0; 2]).unwrap();
        let z = PhaseState::new(vec![1.0, -1.0], vec![0.0, 0.5]).unwrap();
        let mut p1 = CoupledPair::new(z.clone(), z.clone(), 4);
        let mut p2 = p1.clone();
        let mut p3 = p1.clone();
        let full = [1, 2, 3, 4, 5];
        let mut led = WorkLedger::default();
        for i in 0..30 {
            let oct = [quad(NoiseKey::new(7, Stream::Scratch).step(2 * i), 2), quad(NoiseKey::new(7, Stream::Scratch).step(2 * i + 1), 2)];
            coupled_ubu_step(&t, &mut p1, 0.2, 1.0, &oct, &mut led).unwrap();
            coupled_svrg_step(&t, &ap, &mut p2, 0.2, 1.0, &oct, &full, &full, i % 2 == 0, &mut led).unwrap();
            coupled_approx_step(&t, &ap, &mut p3, 0.2, 1.0, &oct, &mut led).unwrap();
        }
        assert!(p1.coarse.distance(&p2.coarse) < 1e-10 && p1.fine.distance(&p2.fine) < 1e-10);
        assert!(p1.coarse.distance(&p3.coarse) < 1e-10 && p1.fine.distance(&p3.fine) < 1e-10);
    }

    #[test]
    fn approx_anchor_counts_per_chain() {
        let t = GaussianTarget::new(2, 3.0).unwrap();
        let ap = t.gaussian_approx_at(&[0.0; 2]).unwrap();
        let z = PhaseState::zeros(2);
        let tau = 4;
        let mut pair = CoupledPair::new(z.clone(), z, tau);
        let mut led = WorkLedger::default();
        let steps = 9u64;
        for i in 0..steps as i64 {
            let oct = [quad(NoiseKey::new(8, Stream::Scratch).step(2 * i), 2), quad(NoiseKey::new(8, Stream::Scratch).step(2 * i + 1), 2)];
            coupled_approx_step(&t, &ap, &mut pair, 0.2, 1.0, &oct, &mut led).unwrap();
        }
        assert_eq!(pair.coarse_anchor.k, steps);
        assert_eq!(pair.fine_anchor.k, 2 * steps);
        let expect = steps.div_ceil(tau as u64) + (2 * steps).div_ceil(tau as u64);
        assert_eq!(led.full_gradients, expect);
    }

    fn cfg(mode: GradientMode, b0: usize, b: usize, k: usize) -> RunConfig {
        let mut c = RunConfig::with_defaults(mode, 0.5, 1.0, 1.0, 4.0, 10);
        c.b0 = b0;
        c.b = b;
        c.k = k;
        c.n_b = 3;
        c.tau = 4;
        c
    }

    #[test]
    fn minimal_schedule_single_coupled_step() {
        let t = GaussianTarget::new(2, 4.0).unwrap();
        let ap = t.gaussian_approx_at(&[0.0; 2]).unwrap();
        let c = cfg(GradientMode::Exact, 0, 0, 1);
        let keys = RunKeys::new(NoiseKey::new(3, Stream::Pair));
        let (s, led) = collect_pairs(&t, &ap, &c, 0, &keys).unwrap();
        assert_eq!(s.coarse.len(), 1);
        assert_eq!(led.full_gradients, 3);
    }

    #[test]
    fn two_level_tail_equals_pairwise_run() {
        for mode in [GradientMode::Exact, GradientMode::Svrg, GradientMode::Approx] {
            let t = GaussianTarget::split(3, 4.0, 12).unwrap();
            let ap = t.gaussian_approx_at(&[0.0; 3]).unwrap();
            let c = cfg(mode, 3, 2, 5);
            for level in 0..3u32 {
                let keys = RunKeys::new(NoiseKey::new(11, Stream::Pair).replicate(level as u64));
                let (pairs, led_pair) = collect_pairs(&t, &ap, &c, level, &keys).unwrap();
                let mut coarse = Vec::new();
                let mut fine = Vec::new();
                let chains = joint_tail_coupling(&t, &ap, &c, &keys, level..=level + 1, |l, _, z| {
                    if l == level {
                        coarse.push(z.clone());
                    } else {
                        fine.push(z.clone());
                    }
                })
                .unwrap();
                assert_eq!(coarse, pairs.coarse, "{mode:?} level {level}");
                assert_eq!(fine, pairs.fine, "{mode:?} level {level}");
                let mut led = chains[0].ledger;
                led.add(&chains[1].ledger);
                assert_eq!(led, led_pair);
            }
        }
    }

    #[test]
    fn level_zero_inexact_coarse_is_gaussian() {
        let t = GaussianTarget::new(2, 4.0).unwrap();
        let ap = t.gaussian_approx_at(&[0.0; 2]).unwrap();
        let c = cfg(GradientMode::Approx, 0, 0, 1000);
        let mut s = [0.0; 2];
        let mut n = 0usize;
        for r in 0..100u64 {
            let keys = RunKeys::new(NoiseKey::new(12, Stream::Pair).replicate(r));
            let (pairs, _) = collect_pairs(&t, &ap, &c, 0, &keys).unwrap();
            for z in &pairs.coarse {
                s[0] += z.x[0] * z.x[0];
                s[1] += z.x[1] * z.x[1];
                n += 1;
            }
        }
        assert!((s[0] / n as f64 - 1.0).abs() < 0.02 * 3.0);
        assert!((s[1] / n as f64 * 4.0 - 1.0).abs() < 0.02 * 3.0);
    }
}
