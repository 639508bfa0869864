//! Run configuration shared by the estimators.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GradientMode {
    Exact,
    Svrg,
    Approx,
}

/// Start distribution for exact-mode chains.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum InitDistribution {
    /// Position at the mode, standard normal velocity.
    #[default]
    MapDirac,
    /// Draw from the Gaussian approximation at the mode.
    GaussianApprox,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub h0: f64,
    pub gamma: f64,
    /// Level-0 burn-in, in steps of the level's coarse kernel (diffusion time `h0` each).
    pub b0: usize,
    /// Extra burn-in per level.
    pub b: usize,
    pub k: usize,
    pub n: usize,
    pub c_n: f64,
    pub phi_n: f64,
    pub c_r: f64,
    pub gradient_mode: GradientMode,
    /// Anchor period in steps of the chain's own kernel.
    pub tau: usize,
    pub n_b: usize,
    pub seed: u64,
    pub init: InitDistribution,
}

/// Mode-specific defaults for `(c_N, φ_N, c_R)`.
pub fn schedule_defaults(mode: GradientMode) -> (f64, f64, f64) {
    match mode {
        GradientMode::Exact => (1.0 / 16.0, 4.0, 0.25),
        GradientMode::Svrg => (1.0 / 64.0, 4.0, 1.0 / (2.0 * 2f64.sqrt())),
        GradientMode::Approx => (1.0 / 64.0, 2.0 * 2f64.sqrt(), 0.5),
    }
}

/// Burn-in defaults `(B0, B)` from the theoretical bounds.
///
/// `m` and `big_m` are the extreme eigenvalues of the Hessian at the mode;
/// `n_data` is ignored in exact mode. Negative values clamp to zero.
pub fn burn_in_defaults(
    mode: GradientMode,
    h0: f64,
    gamma: f64,
    m: f64,
    big_m: f64,
    n_data: usize,
) -> (usize, usize) {
    let scale = 16.0 * gamma / (m * h0);
    let nd = n_data.max(1) as f64;
    let (b, b0) = match mode {
        GradientMode::Exact => {
            let c_mu0 = 2.0;
            (
                scale * 4f64.ln(),
                scale * ((c_mu0 + 1.0) / (big_m.sqrt() * gamma * h0 * h0)).ln(),
            )
        }
        // With rescaled constants γ̃ = γ/√N_D and m̃ = m/N_D the prefactor
        // 16γ̃/(m̃ h0 √N_D) equals 16γ/(m h0).
        GradientMode::Svrg => (
            scale * 2f64.powf(1.5).ln(),
            scale * (1.0 / (nd.powf(2.25) * h0.powf(1.5))).ln(),
        ),
        GradientMode::Approx => (
            scale * 2f64.ln(),
            scale * (1.0 / (nd.powi(3) * h0 * h0)).ln(),
        ),
    };
    let clamp = |t: f64| if t.is_finite() && t > 0.0 { t.ceil() as usize } else { 0 };
    (clamp(b0), clamp(b))
}

impl RunConfig {
    /// A configuration with mode defaults for the schedule and burn-in.
    pub fn with_defaults(
        mode: GradientMode,
        h0: f64,
        gamma: f64,
        m: f64,
        big_m: f64,
        n_data: usize,
    ) -> Self {
        let (c_n, phi_n, c_r) = schedule_defaults(mode);
        let (b0, b) = burn_in_defaults(mode, h0, gamma, m, big_m, n_data);
        let n_b = (n_data / 10).max(1);
        RunConfig {
            h0,
            gamma,
            b0,
            b,
            k: 16,
            n: 64,
            c_n,
            phi_n,
            c_r,
            gradient_mode: mode,
            tau: default_tau(n_data.max(1), n_b),
            n_b,
            seed: 0,
            init: InitDistribution::MapDirac,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.h0 > 0.0 && self.h0.is_finite()) {
            return Err(Error::config("h0", format!("must be positive, got {}", self.h0)));
        }
        if !(self.gamma > 0.0 && self.gamma.is_finite()) {
            return Err(Error::config("gamma", format!("must be positive, got {}", self.gamma)));
        }
        if self.k < 1 {
            return Err(Error::config("k", "must be at least 1"));
        }
        if self.n < 1 {
            return Err(Error::config("n", "must be at least 1"));
        }
        if !(self.c_n > 0.0 && self.c_n.is_finite()) {
            return Err(Error::config("c_n", format!("must be positive, got {}", self.c_n)));
        }
        if !(self.phi_n > 2.0 && self.phi_n.is_finite()) {
            return Err(Error::config("phi_n", format!("must exceed 2, got {}", self.phi_n)));
        }
        let c_r_max = self.phi_n.powf(-0.5);
        if !(self.c_r >= 0.0 && self.c_r < c_r_max) {
            return Err(Error::config(
                "c_r",
                format!("must lie in [0, {c_r_max:.6}), got {}", self.c_r),
            ));
        }
        if self.gradient_mode != GradientMode::Exact {
            if self.tau < 2 || self.tau % 2 != 0 {
                return Err(Error::config(
                    "tau",
                    format!("must be even and at least 2, got {}", self.tau),
                ));
            }
            if self.n_b < 1 {
                return Err(Error::config("n_b", "must be at least 1"));
            }
        }
        Ok(())
    }

    /// Stepsize at level `l`: `h0 / 2^l`.
    pub fn h(&self, level: u32) -> f64 {
        self.h0 / 2f64.powi(level as i32)
    }

    /// Burn-in at level `l`: `B0 + l B`.
    pub fn burn_in(&self, level: u32) -> usize {
        self.b0 + level as usize * self.b
    }
}

/// `⌈N_D/N_b⌉` rounded up to an even number, as required by coupled kernels.
pub fn default_tau(n_data: usize, n_b: usize) -> usize {
    let t = n_data.div_ceil(n_b.max(1)).max(2);
    t + t % 2
}
