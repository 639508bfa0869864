use nalgebra::DMatrix;

use super::{check_component, check_dim, Potential};
use crate::error::{Error, Result};

/// Bayesian multinomial logistic regression with a Gaussian prior.
///
/// Parameters are stacked class by class, `q = (q¹, …, q^m)` with each
/// `q^k ∈ R^{d₀}`. Classes are 0-based here; class `k` is label `k + 1`.
#[derive(Debug, Clone)]
pub struct MultinomialRegression {
    covariates: Vec<f64>,
    labels: Vec<usize>,
    classes: usize,
    d0: usize,
    sigma0_sq: f64,
}

pub const DEFAULT_PRIOR_VARIANCE: f64 = 0.1;

impl MultinomialRegression {
    /// `features[j]` holds the entries of `x^j` without the intercept; each must lie in `[0, 1]`.
    pub fn new(
        features: &[Vec<f64>],
        labels: Vec<usize>,
        classes: usize,
        sigma0_sq: f64,
    ) -> Result<Self> {
        if classes < 2 {
            return Err(Error::InvalidInput("multinomial model needs at least 2 classes".into()));
        }
        if features.len() != labels.len() {
            return Err(Error::InvalidInput(format!(
                "{} covariate rows but {} labels",
                features.len(),
                labels.len()
            )));
        }
        if !(sigma0_sq > 0.0) {
            return Err(Error::InvalidInput("prior variance must be positive".into()));
        }
        let p = features.first().map_or(0, |r| r.len());
        let d0 = p + 1;
        let mut covariates = Vec::with_capacity(features.len() * d0);
        for (j, row) in features.iter().enumerate() {
            if row.len() != p {
                return Err(Error::InvalidInput(format!("covariate row {j} has wrong length")));
            }
            if let Some(v) = row.iter().find(|v| !(0.0..=1.0).contains(*v)) {
                return Err(Error::InvalidInput(format!("covariate row {j} has entry {v} outside [0,1]")));
            }
            covariates.extend_from_slice(row);
            covariates.push(1.0);
        }
        if let Some(&y) = labels.iter().find(|&&y| y >= classes) {
            return Err(Error::InvalidInput(format!("label index {y} out of range for {classes} classes")));
        }
        Ok(MultinomialRegression {
            covariates,
            labels,
            classes,
            d0,
            sigma0_sq,
        })
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    /// Covariate length including the intercept.
    pub fn d0(&self) -> usize {
        self.d0
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn covariate(&self, j: usize) -> &[f64] {
        &self.covariates[j * self.d0..(j + 1) * self.d0]
    }

    pub fn prior_variance(&self) -> f64 {
        self.sigma0_sq
    }

    fn scores(&self, q: &[f64], xj: &[f64], out: &mut [f64]) {
        for (k, o) in out.iter_mut().enumerate() {
            *o = q[k * self.d0..(k + 1) * self.d0]
                .iter()
                .zip(xj)
                .map(|(a, b)| a * b)
                .sum();
        }
    }

    /// Returns log-sum-exp of the scores and overwrites them with softmax weights.
    fn softmax_in_place(s: &mut [f64]) -> f64 {
        let mx = s.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        for v in s.iter_mut() {
            *v = (*v - mx).exp();
            total += *v;
        }
        for v in s.iter_mut() {
            *v /= total;
        }
        mx + total.ln()
    }

    /// Class probabilities for covariate `x` (with intercept).
    pub fn predictive(&self, q: &[f64], x: &[f64]) -> Vec<f64> {
        let mut s = vec![0.0; self.classes];
        self.scores(q, x, &mut s);
        Self::softmax_in_place(&mut s);
        s
    }

    fn add_datum(&self, j: usize, q: &[f64], scale: f64, out: &mut [f64], s: &mut [f64]) {
        let xj = self.covariate(j);
        self.scores(q, xj, s);
        Self::softmax_in_place(s);
        s[self.labels[j]] -= 1.0;
        for k in 0..self.classes {
            let w = scale * s[k];
            for (o, x) in out[k * self.d0..(k + 1) * self.d0].iter_mut().zip(xj) {
                *o += w * x;
            }
        }
    }
}

impl Potential for MultinomialRegression {
    fn dim(&self) -> usize {
        self.classes * self.d0
    }

    fn n_data(&self) -> usize {
        self.labels.len()
    }

    fn value(&self, q: &[f64]) -> Result<f64> {
        check_dim(self.dim(), q.len())?;
        let mut u = q.iter().map(|a| a * a).sum::<f64>() / (2.0 * self.sigma0_sq);
        let mut s = vec![0.0; self.classes];
        for j in 0..self.n_data() {
            self.scores(q, self.covariate(j), &mut s);
            let sy = s[self.labels[j]];
            u += Self::softmax_in_place(&mut s) - sy;
        }
        Ok(u)
    }

    fn grad(&self, q: &[f64], out: &mut [f64]) -> Result<()> {
        check_dim(self.dim(), q.len())?;
        for (o, a) in out.iter_mut().zip(q) {
            *o = a / self.sigma0_sq;
        }
        let mut s = vec![0.0; self.classes];
        for j in 0..self.n_data() {
            self.add_datum(j, q, 1.0, out, &mut s);
        }
        Ok(())
    }

    fn hessian(&self, q: &[f64]) -> Result<DMatrix<f64>> {
        check_dim(self.dim(), q.len())?;
        let d = self.dim();
        let mut h = DMatrix::identity(d, d) / self.sigma0_sq;
        let mut p = vec![0.0; self.classes];
        for j in 0..self.n_data() {
            let xj = self.covariate(j);
            self.scores(q, xj, &mut p);
            Self::softmax_in_place(&mut p);
            for k in 0..self.classes {
                for kp in 0..self.classes {
                    let w = if k == kp { p[k] - p[k] * p[k] } else { -p[k] * p[kp] };
                    for a in 0..self.d0 {
                        let wa = w * xj[a];
                        for b in 0..self.d0 {
                            h[(k * self.d0 + a, kp * self.d0 + b)] += wa * xj[b];
                        }
                    }
                }
            }
        }
        Ok(h)
    }

    fn add_grad_component(&self, i: usize, q: &[f64], scale: f64, out: &mut [f64]) -> Result<()> {
        check_component(i, self.n_data())?;
        if i == 0 {
            for (o, a) in out.iter_mut().zip(q) {
                *o += scale * a / self.sigma0_sq;
            }
        } else {
            let mut s = vec![0.0; self.classes];
            self.add_datum(i - 1, q, scale, out, &mut s);
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
        let mut px = vec![0.0; self.classes];
        let mut py = vec![0.0; self.classes];
        for &i in batch {
            check_component(i, self.n_data())?;
            if i == 0 {
                for k in 0..out.len() {
                    out[k] += scale * (x[k] - y[k]) / self.sigma0_sq;
                }
                continue;
            }
            let xj = self.covariate(i - 1);
            self.scores(x, xj, &mut px);
            Self::softmax_in_place(&mut px);
            self.scores(y, xj, &mut py);
            Self::softmax_in_place(&mut py);
            for k in 0..self.classes {
                let w = scale * (px[k] - py[k]);
                for (o, c) in out[k * self.d0..(k + 1) * self.d0].iter_mut().zip(xj) {
                    *o += w * c;
                }
            }
        }
        Ok(())
    }
}
