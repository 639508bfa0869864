//! Target potentials and the Gaussian approximation at the mode.
//!
//! Potentials decompose as `U = U_0 + Σ_{i=1}^{N_D} U_i`, where `U_0` is the
//! prior term; stochastic-gradient kernels rely on this split.

mod approx;
pub mod gaussian;
pub mod map;
pub mod multinomial;
pub mod poisson;
pub mod precondition;
pub mod synthetic;
pub mod toy;

pub use approx::GaussianApprox;
pub use gaussian::GaussianTarget;
pub use map::{find_map, find_map_with, MapOptions};
pub use multinomial::MultinomialRegression;
pub use poisson::{Game, PoissonSoccer};
pub use precondition::{precondition, PreconditionedPotential};

use nalgebra::DMatrix;

use crate::error::{Error, Result};

pub trait Potential: Send + Sync {
    fn dim(&self) -> usize;

    /// Number of data terms `N_D`; zero for monolithic targets.
    fn n_data(&self) -> usize {
        0
    }

    fn value(&self, x: &[f64]) -> Result<f64>;

    /// Writes `∇U(x)` into `out`.
    fn grad(&self, x: &[f64], out: &mut [f64]) -> Result<()>;

    fn hessian(&self, x: &[f64]) -> Result<DMatrix<f64>>;

    /// Adds `scale · ∇U_i(x)` to `out`; `i = 0` is the prior term.
    fn add_grad_component(&self, i: usize, x: &[f64], scale: f64, out: &mut [f64]) -> Result<()>;

    /// Adds `scale · Σ_{i ∈ batch} [∇U_i(x) − ∇U_i(y)]` to `out`.
    fn add_grad_component_diffs(
        &self,
        batch: &[usize],
        x: &[f64],
        y: &[f64],
        scale: f64,
        out: &mut [f64],
    ) -> Result<()> {
        for &i in batch {
            self.add_grad_component(i, x, scale, out)?;
            self.add_grad_component(i, y, -scale, out)?;
        }
        Ok(())
    }

    /// Gaussian approximation `N(x, ∇²U(x)^{-1})` built from the Hessian at `x`.
    fn gaussian_approx_at(&self, x: &[f64]) -> Result<GaussianApprox> {
        GaussianApprox::from_hessian(x.to_vec(), self.hessian(x)?)
    }

    fn grad_vec(&self, x: &[f64]) -> Result<Vec<f64>> {
        let mut g = vec![0.0; self.dim()];
        self.grad(x, &mut g)?;
        Ok(g)
    }

    fn grad_component(&self, i: usize, x: &[f64]) -> Result<Vec<f64>> {
        let mut g = vec![0.0; self.dim()];
        self.add_grad_component(i, x, 1.0, &mut g)?;
        Ok(g)
    }

    /// `Σ_{i=1}^{N_D} ∇U_i(x)`, the data part of the gradient.
    fn grad_data_sum(&self, x: &[f64], out: &mut [f64]) -> Result<()> {
        self.grad(x, out)?;
        self.add_grad_component(0, x, -1.0, out)
    }
}

impl<P: Potential + ?Sized> Potential for &P {
    fn dim(&self) -> usize {
        (**self).dim()
    }
    fn n_data(&self) -> usize {
        (**self).n_data()
    }
    fn value(&self, x: &[f64]) -> Result<f64> {
        (**self).value(x)
    }
    fn grad(&self, x: &[f64], out: &mut [f64]) -> Result<()> {
        (**self).grad(x, out)
    }
    fn hessian(&self, x: &[f64]) -> Result<DMatrix<f64>> {
        (**self).hessian(x)
    }
    fn add_grad_component(&self, i: usize, x: &[f64], scale: f64, out: &mut [f64]) -> Result<()> {
        (**self).add_grad_component(i, x, scale, out)
    }
    fn add_grad_component_diffs(
        &self,
        batch: &[usize],
        x: &[f64],
        y: &[f64],
        scale: f64,
        out: &mut [f64],
    ) -> Result<()> {
        (**self).add_grad_component_diffs(batch, x, y, scale, out)
    }
    fn gaussian_approx_at(&self, x: &[f64]) -> Result<GaussianApprox> {
        (**self).gaussian_approx_at(x)
    }
    fn grad_data_sum(&self, x: &[f64], out: &mut [f64]) -> Result<()> {
        (**self).grad_data_sum(x, out)
    }
}

/// Minimizer and Gaussian approximation of a potential.
pub fn hessian_at_min<P: Potential + ?Sized>(p: &P, x_star: &[f64]) -> Result<GaussianApprox> {
    p.gaussian_approx_at(x_star)
}

pub(crate) fn check_dim(expected: usize, got: usize) -> Result<()> {
    if expected != got {
        Err(Error::DimensionMismatch { expected, got })
    } else {
        Ok(())
    }
}

pub(crate) fn check_component(i: usize, n_data: usize) -> Result<()> {
    if i > n_data {
        Err(Error::InvalidInput(format!(
            "component index {i} out of range 0..={n_data}"
        )))
    } else {
        Ok(())
    }
}

pub(crate) fn softplus(t: f64) -> f64 {
    if t > 0.0 {
        t + (-t).exp().ln_1p()
    } else {
        t.exp().ln_1p()
    }
}

pub(crate) fn sigmoid(t: f64) -> f64 {
    if t >= 0.0 {
        1.0 / (1.0 + (-t).exp())
    } else {
        let e = t.exp();
        e / (1.0 + e)
    }
}
