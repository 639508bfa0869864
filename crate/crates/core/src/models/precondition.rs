use nalgebra::DMatrix;

use super::{check_dim, GaussianApprox, Potential};
use crate::error::Result;

/// `V(y) = U(x* + A y)` with `A = H*^{-1/2}`, so the mode moves to the origin
/// and the Hessian there becomes the identity.
#[derive(Debug, Clone)]
pub struct PreconditionedPotential<P> {
    base: P,
    approx: GaussianApprox,
}

pub fn precondition<P: Potential>(base: P, approx: GaussianApprox) -> PreconditionedPotential<P> {
    PreconditionedPotential { base, approx }
}

impl<P: Potential> PreconditionedPotential<P> {
    pub fn base(&self) -> &P {
        &self.base
    }

    /// Gaussian approximation of the base potential (center `x*`, Hessian `H*`).
    pub fn base_approx(&self) -> &GaussianApprox {
        &self.approx
    }

    /// `x = x* + A y`.
    pub fn to_original(&self, y: &[f64]) -> Vec<f64> {
        let mut x = self.approx.apply_inv_sqrt(y);
        for (a, c) in x.iter_mut().zip(self.approx.center()) {
            *a += c;
        }
        x
    }

    fn pull_back(&self, v: &[f64], out: &mut [f64], scale: f64, accumulate: bool) {
        let w = self.approx.apply_inv_sqrt(v);
        for (o, a) in out.iter_mut().zip(w) {
            if accumulate {
                *o += scale * a;
            } else {
                *o = scale * a;
            }
        }
    }
}

impl<P: Potential> Potential for PreconditionedPotential<P> {
    fn dim(&self) -> usize {
        self.base.dim()
    }

    fn n_data(&self) -> usize {
        self.base.n_data()
    }

    fn value(&self, y: &[f64]) -> Result<f64> {
        check_dim(self.dim(), y.len())?;
        self.base.value(&self.to_original(y))
    }

    fn grad(&self, y: &[f64], out: &mut [f64]) -> Result<()> {
        check_dim(self.dim(), y.len())?;
        let g = self.base.grad_vec(&self.to_original(y))?;
        self.pull_back(&g, out, 1.0, false);
        Ok(())
    }

    fn hessian(&self, y: &[f64]) -> Result<DMatrix<f64>> {
        let a = self.approx.inv_sqrt_matrix();
        Ok(&a * self.base.hessian(&self.to_original(y))? * &a)
    }

    fn add_grad_component(&self, i: usize, y: &[f64], scale: f64, out: &mut [f64]) -> Result<()> {
        let g = self.base.grad_component(i, &self.to_original(y))?;
        self.pull_back(&g, out, scale, true);
        Ok(())
    }

    fn add_grad_component_diffs(
        &self,
        batch: &[usize],
        x: &[f64],
        y: &[f64],
        scale: f64,
        out: &mut [f64],
    ) -> Result<()> {
        let mut acc = vec![0.0; self.dim()];
        self.base
            .add_grad_component_diffs(batch, &self.to_original(x), &self.to_original(y), 1.0, &mut acc)?;
        self.pull_back(&acc, out, scale, true);
        Ok(())
    }

    fn gaussian_approx_at(&self, y: &[f64]) -> Result<GaussianApprox> {
        check_dim(self.dim(), y.len())?;
        if y.iter().all(|a| *a == 0.0) {
            return GaussianApprox::diagonal(vec![0.0; self.dim()], vec![1.0; self.dim()]);
        }
        GaussianApprox::from_hessian(y.to_vec(), self.hessian(y)?)
    }

    fn grad_data_sum(&self, y: &[f64], out: &mut [f64]) -> Result<()> {
        let mut g = vec![0.0; self.dim()];
        self.base.grad_data_sum(&self.to_original(y), &mut g)?;
        self.pull_back(&g, out, 1.0, false);
        Ok(())
    }
}
