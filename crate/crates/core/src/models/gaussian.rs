use nalgebra::{DMatrix, DVector};

use super::{check_component, check_dim, GaussianApprox, Potential};
use crate::error::{Error, Result};

/// Centered Gaussian with diagonal precision `Λ`.
///
/// Optionally split into `N_D` quadratic data terms with diagonal precisions
/// summing to `Λ`, so stochastic-gradient kernels have something to subsample.
#[derive(Debug, Clone)]
pub struct GaussianTarget {
    lambdas: Vec<f64>,
    prior: Vec<f64>,
    parts: Vec<Vec<f64>>,
}

impl GaussianTarget {
    /// Eigenvalues `1 + k(κ−1)/(d−1)`, `k = 0..d−1`.
    pub fn new(d: usize, kappa: f64) -> Result<Self> {
        if d == 0 {
            return Err(Error::InvalidInput("gaussian target needs d >= 1".into()));
        }
        if !(kappa >= 1.0) {
            return Err(Error::InvalidInput(format!("kappa must be >= 1, got {kappa}")));
        }
        let lambdas = spectrum(d, kappa);
        Ok(Self::from_diagonal(lambdas))
    }

    pub fn from_diagonal(lambdas: Vec<f64>) -> Self {
        GaussianTarget {
            prior: lambdas.clone(),
            lambdas,
            parts: Vec::new(),
        }
    }

    /// Explicit decomposition `U_0 = ½xᵀdiag(prior)x`, `U_i = ½xᵀdiag(parts[i-1])x`.
    pub fn from_components(prior: Vec<f64>, parts: Vec<Vec<f64>>) -> Result<Self> {
        let d = prior.len();
        let mut lambdas = prior.clone();
        for p in &parts {
            check_dim(d, p.len())?;
            for (l, a) in lambdas.iter_mut().zip(p) {
                *l += a;
            }
        }
        Ok(GaussianTarget {
            lambdas,
            prior,
            parts,
        })
    }

    /// Splits the precision into `n_data` unequal data terms with no prior term.
    pub fn split(d: usize, kappa: f64, n_data: usize) -> Result<Self> {
        let lambdas = Self::new(d, kappa)?.lambdas;
        if n_data == 0 {
            return Ok(Self::from_diagonal(lambdas));
        }
        let mut weights = vec![vec![0.0; d]; n_data];
        for k in 0..d {
            let raw: Vec<f64> = (0..n_data)
                .map(|i| 1.0 + 0.9 * (2.399_963 * ((i + 1) * (k + 1)) as f64 + k as f64).cos())
                .collect();
            let total: f64 = raw.iter().sum();
            for i in 0..n_data {
                weights[i][k] = lambdas[k] * raw[i] / total;
            }
        }
        Self::from_components(vec![0.0; d], weights)
    }

    pub fn eigenvalues(&self) -> &[f64] {
        &self.lambdas
    }
}

pub(crate) fn spectrum(d: usize, kappa: f64) -> Vec<f64> {
    if d == 1 {
        return vec![1.0];
    }
    (0..d)
        .map(|k| 1.0 + k as f64 * (kappa - 1.0) / (d - 1) as f64)
        .collect()
}

impl Potential for GaussianTarget {
    fn dim(&self) -> usize {
        self.lambdas.len()
    }

    fn n_data(&self) -> usize {
        self.parts.len()
    }

    fn value(&self, x: &[f64]) -> Result<f64> {
        check_dim(self.dim(), x.len())?;
        Ok(0.5 * x.iter().zip(&self.lambdas).map(|(a, l)| l * a * a).sum::<f64>())
    }

    fn grad(&self, x: &[f64], out: &mut [f64]) -> Result<()> {
        check_dim(self.dim(), x.len())?;
        for ((o, a), l) in out.iter_mut().zip(x).zip(&self.lambdas) {
            *o = l * a;
        }
        Ok(())
    }

    fn hessian(&self, x: &[f64]) -> Result<DMatrix<f64>> {
        check_dim(self.dim(), x.len())?;
        Ok(DMatrix::from_diagonal(&DVector::from_vec(self.lambdas.clone())))
    }

    fn add_grad_component(&self, i: usize, x: &[f64], scale: f64, out: &mut [f64]) -> Result<()> {
        check_component(i, self.n_data())?;
        let w = if i == 0 { &self.prior } else { &self.parts[i - 1] };
        for ((o, a), l) in out.iter_mut().zip(x).zip(w) {
            *o += scale * l * a;
        }
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
        for &i in batch {
            if i == 0 || i > self.n_data() {
                check_component(i, self.n_data())?;
            }
            let w = if i == 0 { &self.prior } else { &self.parts[i - 1] };
            for k in 0..out.len() {
                out[k] += scale * w[k] * (x[k] - y[k]);
            }
        }
        Ok(())
    }

    fn gaussian_approx_at(&self, x: &[f64]) -> Result<GaussianApprox> {
        check_dim(self.dim(), x.len())?;
        GaussianApprox::diagonal(x.to_vec(), self.lambdas.clone())
    }
}
