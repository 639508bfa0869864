//! Small smooth targets used by tests and the strong-order harness.

use nalgebra::{DMatrix, DVector};

use super::{check_component, check_dim, sigmoid, softplus, Potential};
use crate::error::Result;

/// `U(x) = x⁴/4 + x²/2` in one dimension.
#[derive(Debug, Clone, Copy)]
pub struct QuarticToy;

impl Potential for QuarticToy {
    fn dim(&self) -> usize {
        1
    }

    fn value(&self, x: &[f64]) -> Result<f64> {
        check_dim(1, x.len())?;
        Ok(x[0].powi(4) / 4.0 + x[0] * x[0] / 2.0)
    }

    fn grad(&self, x: &[f64], out: &mut [f64]) -> Result<()> {
        check_dim(1, x.len())?;
        out[0] = x[0].powi(3) + x[0];
        Ok(())
    }

    fn hessian(&self, x: &[f64]) -> Result<DMatrix<f64>> {
        Ok(DMatrix::from_element(1, 1, 3.0 * x[0] * x[0] + 1.0))
    }

    fn add_grad_component(&self, i: usize, x: &[f64], scale: f64, out: &mut [f64]) -> Result<()> {
        check_component(i, 0)?;
        out[0] += scale * (x[0].powi(3) + x[0]);
        Ok(())
    }
}

/// Product target `U(x) = Σ_k [½λ_k x_k² + ε softplus(x_k + 1)]`.
///
/// Convex, non-quadratic, and asymmetric, so approximate gradients carry a
/// bias; per-coordinate marginals allow quadrature reference values.
#[derive(Debug, Clone)]
pub struct PerturbedGaussian {
    pub lambdas: Vec<f64>,
    pub eps: f64,
}

impl PerturbedGaussian {
    pub fn new(lambdas: Vec<f64>, eps: f64) -> Self {
        PerturbedGaussian { lambdas, eps }
    }

    /// `E[x_k]` and `E[x_k²]` under `exp(−U)` by trapezoidal quadrature.
    pub fn marginal_moments(&self, k: usize) -> (f64, f64) {
        let l = self.lambdas[k];
        let sd = 1.0 / l.sqrt();
        let n = 200_000;
        let (lo, hi) = (-14.0 * sd - 2.0, 14.0 * sd + 2.0);
        let dx = (hi - lo) / n as f64;
        let (mut z, mut m1, mut m2) = (0.0, 0.0, 0.0);
        for i in 0..=n {
            let x = lo + i as f64 * dx;
            let w = if i == 0 || i == n { 0.5 } else { 1.0 };
            let p = w * (-(0.5 * l * x * x + self.eps * softplus(x + 1.0))).exp();
            z += p;
            m1 += p * x;
            m2 += p * x * x;
        }
        (m1 / z, m2 / z)
    }
}

impl Potential for PerturbedGaussian {
    fn dim(&self) -> usize {
        self.lambdas.len()
    }

    fn value(&self, x: &[f64]) -> Result<f64> {
        check_dim(self.dim(), x.len())?;
        Ok(x
            .iter()
            .zip(&self.lambdas)
            .map(|(a, l)| 0.5 * l * a * a + self.eps * softplus(a + 1.0))
            .sum())
    }

    fn grad(&self, x: &[f64], out: &mut [f64]) -> Result<()> {
        check_dim(self.dim(), x.len())?;
        for ((o, a), l) in out.iter_mut().zip(x).zip(&self.lambdas) {
            *o = l * a + self.eps * sigmoid(a + 1.0);
        }
        Ok(())
    }

    fn hessian(&self, x: &[f64]) -> Result<DMatrix<f64>> {
        check_dim(self.dim(), x.len())?;
        Ok(DMatrix::from_diagonal(&DVector::from_iterator(
            x.len(),
            x.iter().zip(&self.lambdas).map(|(a, l)| {
                let s = sigmoid(a + 1.0);
                l + self.eps * s * (1.0 - s)
            }),
        )))
    }

    fn add_grad_component(&self, i: usize, x: &[f64], scale: f64, out: &mut [f64]) -> Result<()> {
        check_component(i, 0)?;
        for ((o, a), l) in out.iter_mut().zip(x).zip(&self.lambdas) {
            *o += scale * (l * a + self.eps * sigmoid(a + 1.0));
        }
        Ok(())
    }
}
