//! Randomized Hamiltonian Monte Carlo with partial velocity refreshment.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::models::Potential;
use crate::noise::{fill_gaussians, uniform, NoiseKey, Stream};
use crate::observables::TestFunctionSet;
use crate::state::PhaseState;

pub const DEFAULT_ALPHA: f64 = 0.7;
pub const TARGET_ACCEPTANCE: f64 = 0.65;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RhmcConfig {
    /// Leapfrog stepsize.
    pub h: f64,
    /// Mean of the geometric number of leapfrog steps per proposal.
    pub expected_l: f64,
    /// Partial refreshment `v ← αv + √(1−α²) ξ`.
    pub alpha: f64,
    /// Recorded proposals per chain.
    pub k: usize,
    /// Discarded proposals per chain.
    pub burn_in: usize,
}

impl RhmcConfig {
    pub fn new(h: f64, expected_l: f64) -> Self {
        RhmcConfig {
            h,
            expected_l,
            alpha: DEFAULT_ALPHA,
            k: 1000,
            burn_in: 0,
        }
    }

    /// `E_L = ⌈1/(h√m)⌉`, so that `E_L h ≈ 1/√m`.
    pub fn with_integration_time(h: f64, m: f64) -> Result<Self> {
        if !(m > 0.0) {
            return Err(Error::config("m", format!("must be positive, got {m}")));
        }
        Ok(RhmcConfig::new(h, expected_steps(h, m)))
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.h > 0.0 && self.h.is_finite()) {
            return Err(Error::config("h", format!("must be positive, got {}", self.h)));
        }
        if !(self.expected_l >= 1.0 && self.expected_l.is_finite()) {
            return Err(Error::config("expected_l", format!("must be at least 1, got {}", self.expected_l)));
        }
        if !(0.0..1.0).contains(&self.alpha) {
            return Err(Error::config("alpha", format!("must lie in [0, 1), got {}", self.alpha)));
        }
        if self.k < 1 {
            return Err(Error::config("k", "must be at least 1"));
        }
        Ok(())
    }
}

fn expected_steps(h: f64, m: f64) -> f64 {
    (1.0 / (h * m.sqrt()) - 1e-9).ceil().max(1.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LeapfrogOutcome {
    pub grad_evals: u64,
    pub diverged: bool,
}

/// `L` leapfrog steps (half kick, drift, half kick) reusing the gradient at
/// step boundaries: `L + 1` gradient evaluations.
pub fn leapfrog<P: Potential + ?Sized>(p: &P, z: &mut PhaseState, h: f64, l: usize) -> Result<LeapfrogOutcome> {
    if l < 1 {
        return Err(Error::InvalidInput("leapfrog needs L >= 1".into()));
    }
    let d = z.x.len();
    let mut g = vec![0.0; d];
    p.grad(&z.x, &mut g)?;
    for _ in 0..l {
        for k in 0..d {
            z.v[k] -= 0.5 * h * g[k];
            z.x[k] += h * z.v[k];
        }
        p.grad(&z.x, &mut g)?;
        for k in 0..d {
            z.v[k] -= 0.5 * h * g[k];
        }
        if !z.is_finite() {
            return Ok(LeapfrogOutcome {
                grad_evals: l as u64 + 1,
                diverged: true,
            });
        }
    }
    Ok(LeapfrogOutcome {
        grad_evals: l as u64 + 1,
        diverged: false,
    })
}

/// Geometric draw on `{1, 2, …}` with mean `expected_l`.
pub fn geometric_steps(expected_l: f64, u: f64) -> usize {
    if expected_l <= 1.0 {
        return 1;
    }
    let q = 1.0 - 1.0 / expected_l;
    // u ∈ [0, 1); 1 − u ∈ (0, 1] keeps the logarithm finite.
    1 + ((1.0 - u).ln() / q.ln()).floor() as usize
}

fn hamiltonian<P: Potential + ?Sized>(p: &P, z: &PhaseState) -> Result<f64> {
    Ok(p.value(&z.x)? + 0.5 * z.v.iter().map(|v| v * v).sum::<f64>())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RhmcStep {
    pub accepted: bool,
    pub l: usize,
    pub grad_evals: u64,
    pub diverged: bool,
    /// `min(1, exp(H_old − H_new))`, zero on divergence.
    pub accept_prob: f64,
}

/// One proposal: geometric `L`, leapfrog, Metropolis test with velocity flip
/// on rejection, then partial refreshment.
pub fn rhmc_step<P: Potential + ?Sized>(
    p: &P,
    z: &mut PhaseState,
    cfg: &RhmcConfig,
    key: NoiseKey,
) -> Result<RhmcStep> {
    let l = geometric_steps(cfg.expected_l, uniform(key.slot(0)));
    let h_old = hamiltonian(p, z)?;
    let mut prop = z.clone();
    let lf = leapfrog(p, &mut prop, cfg.h, l)?;
    let accept_prob = if lf.diverged {
        0.0
    } else {
        let h_new = hamiltonian(p, &prop)?;
        if h_new.is_finite() {
            (h_old - h_new).exp().min(1.0)
        } else {
            0.0
        }
    };
    let accepted = uniform(key.slot(1)) < accept_prob;
    if accepted {
        *z = prop;
    } else {
        z.v.iter_mut().for_each(|v| *v = -*v);
    }
    let mut xi = vec![0.0; z.v.len()];
    fill_gaussians(key.slot(2), &mut xi);
    let b = (1.0 - cfg.alpha * cfg.alpha).sqrt();
    for (v, x) in z.v.iter_mut().zip(&xi) {
        *v = cfg.alpha * *v + b * x;
    }
    Ok(RhmcStep {
        accepted,
        l,
        grad_evals: lf.grad_evals,
        diverged: lf.diverged,
        accept_prob,
    })
}

/// Per-chain averages and counters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChainSummary {
    pub means: Vec<f64>,
    pub acceptance: f64,
    pub grad_evals: u64,
    pub proposals: u64,
    pub divergences: u64,
}

/// Runs `burn_in + k` proposals and averages the test functions over the last `k`.
pub fn run_chain<P: Potential + ?Sized>(
    p: &P,
    cfg: &RhmcConfig,
    init: PhaseState,
    fset: &TestFunctionSet,
    key: NoiseKey,
) -> Result<ChainSummary> {
    cfg.validate()?;
    let mut z = init;
    let mut acc = vec![0.0; fset.len()];
    let mut accepted = 0u64;
    let mut grads = 0u64;
    let mut div = 0u64;
    let total = cfg.burn_in + cfg.k;
    for i in 0..total {
        let s = rhmc_step(p, &mut z, cfg, key.step(i as i64))?;
        accepted += u64::from(s.accepted);
        grads += s.grad_evals;
        div += u64::from(s.diverged);
        if i >= cfg.burn_in {
            fset.accumulate(&z.x, &mut acc);
        }
    }
    let means: Vec<f64> = acc.iter().map(|a| a / cfg.k as f64).collect();
    if means.iter().any(|m| !m.is_finite()) {
        return Err(Error::non_finite("RHMC chain average"));
    }
    Ok(ChainSummary {
        means,
        acceptance: accepted as f64 / total as f64,
        grad_evals: grads,
        proposals: total as u64,
        divergences: div,
    })
}

/// Independent chains `0..runs`, chain `r` started from `init(r)`.
pub fn run_ensemble<P, I>(
    p: &P,
    cfg: &RhmcConfig,
    fset: &TestFunctionSet,
    runs: usize,
    seed: u64,
    init: I,
) -> Result<Vec<ChainSummary>>
where
    P: Potential + ?Sized,
    I: Fn(u64) -> PhaseState + Sync,
{
    (0..runs as u64)
        .into_par_iter()
        .map(|r| run_chain(p, cfg, init(r), fset, NoiseKey::new(seed, Stream::Rhmc).replicate(r)))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AutotuneOptions {
    pub pilot_steps: usize,
    /// Independent pilot chains per stepsize; their acceptances are averaged.
    pub pilot_chains: usize,
    /// A draft whose pilot acceptance falls here is returned unchanged.
    pub keep_band: (f64, f64),
    /// Stopping band of the search; narrower than `keep_band` so that the
    /// tuned stepsize stays inside it despite pilot noise.
    pub band: (f64, f64),
    pub max_bisections: usize,
}

impl Default for AutotuneOptions {
    fn default() -> Self {
        AutotuneOptions {
            pilot_steps: 500,
            pilot_chains: 4,
            keep_band: (0.60, 0.70),
            band: (0.62, 0.68),
            max_bisections: 20,
        }
    }
}

/// Tunes `h` by bisection on pilot acceptance, keeping `E_L = ⌈1/(h√m)⌉`.
pub fn autotune<P: Potential + ?Sized>(
    p: &P,
    draft: &RhmcConfig,
    m: f64,
    init: &PhaseState,
    seed: u64,
    opts: &AutotuneOptions,
) -> Result<RhmcConfig> {
    draft.validate()?;
    if !(m > 0.0) {
        return Err(Error::config("m", format!("must be positive, got {m}")));
    }
    let (lo_t, hi_t) = opts.band;
    let mut state = vec![init.clone(); opts.pilot_chains.max(1)];
    let mut round = 0u64;
    let mut pilot = |h: f64, state: &mut Vec<PhaseState>| -> Result<f64> {
        let cfg = RhmcConfig {
            h,
            expected_l: expected_steps(h, m),
            ..*draft
        };
        let chains = state.len() as u64;
        let mut acc = 0.0;
        for (c, s) in state.iter_mut().enumerate() {
            let key = NoiseKey::new(seed, Stream::Pilot).replicate(round * chains + c as u64);
            let mut z = s.clone();
            for i in 0..opts.pilot_steps {
                acc += rhmc_step(p, &mut z, &cfg, key.step(i as i64))?.accept_prob;
            }
            if z.is_finite() {
                *s = z;
            }
        }
        round += 1;
        Ok(acc / (opts.pilot_steps * state.len()) as f64)
    };
    let finish = |h: f64| RhmcConfig {
        h,
        expected_l: expected_steps(h, m),
        ..*draft
    };

    let a0 = pilot(draft.h, &mut state)?;
    if (opts.keep_band.0..=opts.keep_band.1).contains(&a0) {
        return Ok(*draft);
    }
    // Bracket: acceptance decreases with h.
    let (mut lo, mut hi) = (draft.h, draft.h);
    let mut a = a0;
    let mut tries = 0;
    if a0 > hi_t {
        while a > hi_t {
            tries += 1;
            if tries > opts.max_bisections {
                return Err(Error::Tuning(format!("acceptance stays above {hi_t} up to h = {hi}")));
            }
            lo = hi;
            hi *= 2.0;
            a = pilot(hi, &mut state)?;
            if (lo_t..=hi_t).contains(&a) {
                return Ok(finish(hi));
            }
        }
    } else {
        while a < lo_t {
            tries += 1;
            if tries > opts.max_bisections {
                return Err(Error::Tuning(format!("acceptance stays below {lo_t} down to h = {lo}")));
            }
            hi = lo;
            lo *= 0.5;
            a = pilot(lo, &mut state)?;
            if (lo_t..=hi_t).contains(&a) {
                return Ok(finish(lo));
            }
        }
    }
    for _ in 0..opts.max_bisections {
        let mid = (lo * hi).sqrt();
        let a = pilot(mid, &mut state)?;
        if (lo_t..=hi_t).contains(&a) {
            return Ok(finish(mid));
        }
        if a > hi_t {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Err(Error::Tuning(format!(
        "no stepsize in [{lo}, {hi}] reached acceptance in [{lo_t}, {hi_t}]"
    )))
}
