use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::error::{Error, Result};
use crate::noise::{fill_gaussians, NoiseKey};

/// `μ_G = N(x*, H*^{-1}) × N(0, I)` with `H* = Q Λ Qᵀ`.
///
/// A diagonal `H*` keeps `Q = I` implicit so large product targets stay cheap.
#[derive(Debug, Clone)]
pub struct GaussianApprox {
    center: Vec<f64>,
    eigenvalues: Vec<f64>,
    basis: Option<DMatrix<f64>>,
}

impl GaussianApprox {
    pub fn diagonal(center: Vec<f64>, eigenvalues: Vec<f64>) -> Result<Self> {
        if center.len() != eigenvalues.len() {
            return Err(Error::DimensionMismatch {
                expected: center.len(),
                got: eigenvalues.len(),
            });
        }
        check_positive(&eigenvalues)?;
        Ok(GaussianApprox {
            center,
            eigenvalues,
            basis: None,
        })
    }

    pub fn from_hessian(center: Vec<f64>, hessian: DMatrix<f64>) -> Result<Self> {
        let d = center.len();
        if hessian.nrows() != d || hessian.ncols() != d {
            return Err(Error::DimensionMismatch {
                expected: d,
                got: hessian.nrows(),
            });
        }
        let sym = (&hessian + hessian.transpose()) * 0.5;
        let eig = SymmetricEigen::new(sym);
        let mut order: Vec<usize> = (0..d).collect();
        order.sort_by(|&a, &b| eig.eigenvalues[a].total_cmp(&eig.eigenvalues[b]));
        let eigenvalues: Vec<f64> = order.iter().map(|&k| eig.eigenvalues[k]).collect();
        let mut basis = DMatrix::zeros(d, d);
        for (col, &k) in order.iter().enumerate() {
            basis.set_column(col, &eig.eigenvectors.column(k));
        }
        check_positive(&eigenvalues)?;
        Ok(GaussianApprox {
            center,
            eigenvalues,
            basis: Some(basis),
        })
    }

    pub fn dim(&self) -> usize {
        self.center.len()
    }

    pub fn center(&self) -> &[f64] {
        &self.center
    }

    pub fn eigenvalues(&self) -> &[f64] {
        &self.eigenvalues
    }

    /// Smallest eigenvalue `m`.
    pub fn m(&self) -> f64 {
        self.eigenvalues.iter().cloned().fold(f64::INFINITY, f64::min)
    }

    /// Largest eigenvalue `M`.
    pub fn big_m(&self) -> f64 {
        self.eigenvalues.iter().cloned().fold(0.0, f64::max)
    }

    pub fn is_diagonal(&self) -> bool {
        self.basis.is_none()
    }

    pub fn hessian_matrix(&self) -> DMatrix<f64> {
        let lam = DMatrix::from_diagonal(&DVector::from_vec(self.eigenvalues.clone()));
        match &self.basis {
            None => lam,
            Some(q) => q * lam * q.transpose(),
        }
    }

    /// `Qᵀ v`.
    pub fn to_eigen(&self, v: &[f64]) -> Vec<f64> {
        match &self.basis {
            None => v.to_vec(),
            Some(q) => (q.transpose() * DVector::from_column_slice(v)).as_slice().to_vec(),
        }
    }

    /// `Q w`.
    pub fn from_eigen(&self, w: &[f64]) -> Vec<f64> {
        match &self.basis {
            None => w.to_vec(),
            Some(q) => (q * DVector::from_column_slice(w)).as_slice().to_vec(),
        }
    }

    fn apply_spectral(&self, v: &[f64], f: impl Fn(f64) -> f64) -> Vec<f64> {
        let mut w = self.to_eigen(v);
        for (wk, &l) in w.iter_mut().zip(&self.eigenvalues) {
            *wk *= f(l);
        }
        self.from_eigen(&w)
    }

    /// `H* v`.
    pub fn apply_hessian(&self, v: &[f64]) -> Vec<f64> {
        match &self.basis {
            None => v.iter().zip(&self.eigenvalues).map(|(a, l)| a * l).collect(),
            Some(_) => self.apply_spectral(v, |l| l),
        }
    }

    /// `H*^{-1/2} v`.
    pub fn apply_inv_sqrt(&self, v: &[f64]) -> Vec<f64> {
        self.apply_spectral(v, |l| 1.0 / l.sqrt())
    }

    pub fn inv_sqrt_matrix(&self) -> DMatrix<f64> {
        let s = DMatrix::from_diagonal(&DVector::from_iterator(
            self.dim(),
            self.eigenvalues.iter().map(|l| 1.0 / l.sqrt()),
        ));
        match &self.basis {
            None => s,
            Some(q) => q * s * q.transpose(),
        }
    }

    /// Position draw `x* + Q Λ^{-1/2} ξ` with `ξ` from `key`.
    pub fn sample_position(&self, key: NoiseKey) -> Vec<f64> {
        let mut xi = vec![0.0; self.dim()];
        fill_gaussians(key, &mut xi);
        for (w, &l) in xi.iter_mut().zip(&self.eigenvalues) {
            *w /= l.sqrt();
        }
        let mut x = self.from_eigen(&xi);
        for (a, c) in x.iter_mut().zip(&self.center) {
            *a += c;
        }
        x
    }
}

fn check_positive(eigenvalues: &[f64]) -> Result<()> {
    match eigenvalues.iter().find(|l| !(**l > 0.0) || !l.is_finite()) {
        Some(l) => Err(Error::Model(format!(
            "Hessian at the mode is not positive definite (eigenvalue {l:e})"
        ))),
        None => Ok(()),
    }
}
