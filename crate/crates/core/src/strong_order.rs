//! Coupled `(h, h/2)` pathwise gaps for estimating strong orders.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::couplings::{coupled_approx_step, coupled_svrg_step, coupled_ubu_step, CoupledPair};
use crate::diagnostics::{strong_order_fit, SlopeFit};
use crate::error::{Error, Result};
use crate::inexact::WorkLedger;
use crate::integrators::{em_step, Octet};
use crate::models::{GaussianApprox, Potential};
use crate::noise::{coin, draw_batch, fill_gaussians, NoiseKey, Stream};
use crate::state::PhaseState;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StrongKernel {
    Ubu,
    Em,
    SvrgUbu,
    ApproxUbu,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StrongOrderSetup {
    pub hs: Vec<f64>,
    /// Simulated time; a multiple of every `h`.
    pub horizon: f64,
    pub replicates: usize,
    pub gamma: f64,
    pub seed: u64,
    pub n_b: usize,
    pub tau: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GapRow {
    pub h: f64,
    pub rms_gap: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StrongOrderResult {
    pub rows: Vec<GapRow>,
    /// Stepsizes dropped because a chain diverged.
    pub skipped: Vec<f64>,
    pub fit: SlopeFit,
}

/// RMS over replicates of the phase-space distance at `horizon` between a
/// step-`h` chain and a step-`h/2` chain sharing noise and start `init(r)`.
pub fn coupled_gap<P, I>(
    p: &P,
    approx: &GaussianApprox,
    kernel: StrongKernel,
    setup: &StrongOrderSetup,
    h: f64,
    init: &I,
) -> Result<f64>
where
    P: Potential + ?Sized,
    I: Fn(u64) -> PhaseState + Sync,
{
    let steps = (setup.horizon / h).round();
    if !(steps >= 1.0) || (steps * h - setup.horizon).abs() > 1e-9 * setup.horizon {
        return Err(Error::InvalidInput(format!(
            "horizon {} is not a multiple of h = {h}",
            setup.horizon
        )));
    }
    if kernel == StrongKernel::SvrgUbu && p.n_data() == 0 {
        return Err(Error::InvalidInput("SVRG needs a potential with data terms".into()));
    }
    let steps = steps as i64;
    let d = p.dim();
    let base = NoiseKey::new(setup.seed, Stream::Harness).slot(h.to_bits() as u32 ^ (h.to_bits() >> 32) as u32);
    let sq: Vec<f64> = (0..setup.replicates as u64)
        .into_par_iter()
        .map(|r| -> Result<f64> {
            let key = base.replicate(r);
            let z0 = init(r);
            let mut pair = CoupledPair::new(z0.clone(), z0, setup.tau);
            let mut ledger = WorkLedger::default();
            for j in 0..steps {
                let octet: Octet = std::array::from_fn(|half| {
                    std::array::from_fn(|s| {
                        let mut v = vec![0.0; d];
                        fill_gaussians(key.step(2 * j + half as i64).level(s as u32), &mut v);
                        v
                    })
                });
                match kernel {
                    StrongKernel::Ubu => coupled_ubu_step(p, &mut pair, h, setup.gamma, &octet, &mut ledger)?,
                    StrongKernel::ApproxUbu => {
                        coupled_approx_step(p, approx, &mut pair, h, setup.gamma, &octet, &mut ledger)?
                    }
                    StrongKernel::SvrgUbu => {
                        let bk = key.stream(Stream::Batch);
                        let b0 = draw_batch(bk.step(2 * j), p.n_data(), setup.n_b);
                        let b1 = draw_batch(bk.step(2 * j + 1), p.n_data(), setup.n_b);
                        let c = coin(key.stream(Stream::Coin).step(j));
                        coupled_svrg_step(p, approx, &mut pair, h, setup.gamma, &octet, &b0, &b1, c, &mut ledger)?
                    }
                    StrongKernel::Em => {
                        let (a, b) = (&octet[0][0], &octet[1][0]);
                        em_step(p, &mut pair.fine, h / 2.0, setup.gamma, a)?;
                        em_step(p, &mut pair.fine, h / 2.0, setup.gamma, b)?;
                        let merged: Vec<f64> = a.iter().zip(b).map(|(x, y)| (x + y) * std::f64::consts::FRAC_1_SQRT_2).collect();
                        em_step(p, &mut pair.coarse, h, setup.gamma, &merged)?;
                    }
                }
                if !(pair.coarse.is_finite() && pair.fine.is_finite()) {
                    return Err(Error::Unstable(format!("chain diverged at h = {h}")));
                }
            }
            Ok(pair.coarse.distance(&pair.fine).powi(2))
        })
        .collect::<Result<_>>()?;
    let ms = sq.iter().sum::<f64>() / sq.len() as f64;
    if !ms.is_finite() {
        return Err(Error::Unstable(format!("gap overflowed at h = {h}")));
    }
    Ok(ms.sqrt())
}

/// Gaps over `setup.hs` and the log-log slope; diverging stepsizes are skipped.
pub fn strong_order<P, I>(
    p: &P,
    approx: &GaussianApprox,
    kernel: StrongKernel,
    setup: &StrongOrderSetup,
    init: I,
) -> Result<StrongOrderResult>
where
    P: Potential + ?Sized,
    I: Fn(u64) -> PhaseState + Sync,
{
    if setup.replicates < 1 {
        return Err(Error::InvalidInput("need at least one replicate".into()));
    }
    let mut rows = Vec::new();
    let mut skipped = Vec::new();
    for &h in &setup.hs {
        match coupled_gap(p, approx, kernel, setup, h, &init) {
            Ok(g) => rows.push(GapRow { h, rms_gap: g }),
            Err(Error::Unstable(_)) | Err(Error::NonFinite { .. }) => skipped.push(h),
            Err(e) => return Err(e),
        }
    }
    let hs: Vec<f64> = rows.iter().map(|r| r.h).collect();
    let gaps: Vec<f64> = rows.iter().map(|r| r.rms_gap).collect();
    let fit = strong_order_fit(&hs, &gaps)?;
    Ok(StrongOrderResult { rows, skipped, fit })
}
