//! SVRG and quadratic-approximate gradients with periodic anchoring, and the
//! UBU steps that use them.

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::integrators::{ubu_step_with, Quad};
use crate::models::{GaussianApprox, Potential};
use crate::state::PhaseState;

/// Gradient work counters.
///
/// `data_terms` counts data-term gradient evaluations; a full gradient adds
/// `N_D` of them. Hessian-vector products are kept apart.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct WorkLedger {
    pub full_gradients: u64,
    pub data_terms: u64,
    pub hessian_products: u64,
    pub anchor_refreshes: u64,
}

impl WorkLedger {
    pub fn record_full(&mut self, n_data: usize) {
        self.full_gradients += 1;
        self.data_terms += n_data as u64;
    }

    pub fn record_batch(&mut self, n_b: usize) {
        self.data_terms += n_b as u64;
    }

    pub fn add(&mut self, other: &WorkLedger) {
        self.full_gradients += other.full_gradients;
        self.data_terms += other.data_terms;
        self.hessian_products += other.hessian_products;
        self.anchor_refreshes += other.anchor_refreshes;
    }

    /// Work in full-data passes: `data_terms / N_D`, or full gradients for
    /// monolithic targets.
    pub fn passes(&self, n_data: usize) -> f64 {
        if n_data == 0 {
            self.full_gradients as f64
        } else {
            self.data_terms as f64 / n_data as f64
        }
    }

    /// Work in full-data passes with anchor refreshes left out.
    pub fn passes_excluding_anchors(&self, n_data: usize) -> f64 {
        if n_data == 0 {
            (self.full_gradients - self.anchor_refreshes) as f64
        } else {
            self.passes(n_data) - self.anchor_refreshes as f64
        }
    }
}

/// Chain-local anchor `x̂` with its cached gradient.
///
/// `g_hat` is `Σ_{i≥1} ∇U_i(x̂)` for SVRG and `∇U(x̂)` for the quadratic
/// approximation. The anchor is refreshed at the gradient point whenever the
/// chain's own step counter is a multiple of `tau`.
#[derive(Debug, Clone, PartialEq)]
pub struct AnchorState {
    pub x_hat: Vec<f64>,
    pub g_hat: Vec<f64>,
    pub k: u64,
    /// `None` keeps the initial anchor forever.
    pub tau: Option<u64>,
}

impl AnchorState {
    pub fn new(tau: usize) -> Self {
        AnchorState {
            x_hat: Vec::new(),
            g_hat: Vec::new(),
            k: 0,
            tau: Some(tau.max(1) as u64),
        }
    }

    /// A fixed anchor that is never refreshed (control-variate gradient).
    pub fn fixed_svrg<P: Potential + ?Sized>(p: &P, x_hat: &[f64]) -> Result<Self> {
        let mut g = vec![0.0; p.dim()];
        p.grad_data_sum(x_hat, &mut g)?;
        Ok(AnchorState {
            x_hat: x_hat.to_vec(),
            g_hat: g,
            k: 0,
            tau: None,
        })
    }

    pub fn needs_refresh(&self) -> bool {
        self.x_hat.is_empty() || self.tau.is_some_and(|t| self.k % t == 0)
    }

    fn refresh_svrg<P: Potential + ?Sized>(&mut self, p: &P, x: &[f64], ledger: &mut WorkLedger) -> Result<()> {
        self.x_hat = x.to_vec();
        self.g_hat.resize(x.len(), 0.0);
        p.grad_data_sum(x, &mut self.g_hat)?;
        ledger.record_full(p.n_data());
        ledger.anchor_refreshes += 1;
        Ok(())
    }

    fn refresh_full<P: Potential + ?Sized>(&mut self, p: &P, x: &[f64], ledger: &mut WorkLedger) -> Result<()> {
        self.x_hat = x.to_vec();
        self.g_hat.resize(x.len(), 0.0);
        p.grad(x, &mut self.g_hat)?;
        ledger.record_full(p.n_data());
        ledger.anchor_refreshes += 1;
        Ok(())
    }
}

/// `∇U_0(x) + Σ_i ∇U_i(x̂) + (N_D/N_b) Σ_{i∈ω} [∇U_i(x) − ∇U_i(x̂)]`.
///
/// Batch entries index data terms `1..=N_D`.
pub fn svrg_gradient<P: Potential + ?Sized>(
    p: &P,
    x: &[f64],
    batch: &[usize],
    anchor: &AnchorState,
    out: &mut [f64],
) -> Result<()> {
    out.copy_from_slice(&anchor.g_hat);
    p.add_grad_component(0, x, 1.0, out)?;
    let scale = p.n_data() as f64 / batch.len() as f64;
    p.add_grad_component_diffs(batch, x, &anchor.x_hat, scale, out)
}

/// `∇U(x̂) + H*(x − x̂)`.
pub fn quad_gradient(approx: &GaussianApprox, x: &[f64], anchor: &AnchorState, out: &mut [f64]) {
    let dx: Vec<f64> = x.iter().zip(&anchor.x_hat).map(|(a, b)| a - b).collect();
    let hd = approx.apply_hessian(&dx);
    for ((o, g), h) in out.iter_mut().zip(&anchor.g_hat).zip(hd) {
        *o = g + h;
    }
}

/// One UBU step with the SVRG gradient; refreshes the anchor at `x̄` on schedule.
#[allow(clippy::too_many_arguments)]
pub fn svrg_ubu_step<P: Potential + ?Sized>(
    p: &P,
    z: &mut PhaseState,
    anchor: &mut AnchorState,
    h: f64,
    gamma: f64,
    batch: &[usize],
    xi: &Quad,
    ledger: &mut WorkLedger,
) -> Result<()> {
    ubu_step_with(z, h, gamma, xi, |x, out| {
        if anchor.needs_refresh() {
            anchor.refresh_svrg(p, x, ledger)?;
        }
        ledger.record_batch(batch.len());
        svrg_gradient(p, x, batch, anchor, out)
    })?;
    anchor.k += 1;
    Ok(())
}

/// One UBU step with the quadratic approximate gradient.
#[allow(clippy::too_many_arguments)]
pub fn approx_ubu_step<P: Potential + ?Sized>(
    p: &P,
    approx: &GaussianApprox,
    z: &mut PhaseState,
    anchor: &mut AnchorState,
    h: f64,
    gamma: f64,
    xi: &Quad,
    ledger: &mut WorkLedger,
) -> Result<()> {
    ubu_step_with(z, h, gamma, xi, |x, out| {
        if anchor.needs_refresh() {
            anchor.refresh_full(p, x, ledger)?;
        }
        ledger.hessian_products += 1;
        quad_gradient(approx, x, anchor, out);
        Ok(())
    })?;
    anchor.k += 1;
    Ok(())
}
