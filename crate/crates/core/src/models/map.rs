//! Mode finding by damped Newton iterations.

use nalgebra::DVector;

use super::Potential;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy)]
pub struct MapOptions {
    /// Gradient-norm tolerance; `None` means `1e-10 · max(1, ‖∇U(x_init)‖)`.
    pub tol: Option<f64>,
    pub max_iter: usize,
}

impl Default for MapOptions {
    fn default() -> Self {
        MapOptions {
            tol: None,
            max_iter: 500,
        }
    }
}

pub fn find_map<P: Potential + ?Sized>(p: &P, x_init: &[f64]) -> Result<Vec<f64>> {
    find_map_with(p, x_init, MapOptions::default())
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|a| a * a).sum::<f64>().sqrt()
}

/// Newton with Armijo backtracking (`c = 1e-4`, halving); gradient descent
/// direction when the Hessian solve fails.
pub fn find_map_with<P: Potential + ?Sized>(p: &P, x_init: &[f64], opts: MapOptions) -> Result<Vec<f64>> {
    let d = p.dim();
    let mut x = x_init.to_vec();
    let mut g = p.grad_vec(&x)?;
    let mut f = p.value(&x)?;
    if !f.is_finite() || !g.iter().all(|a| a.is_finite()) {
        return Err(Error::non_finite("potential at optimizer start"));
    }
    let tol = opts.tol.unwrap_or(1e-10 * norm(&g).max(1.0));
    let mut x_new = vec![0.0; d];
    for _ in 0..opts.max_iter {
        let gn = norm(&g);
        if gn <= tol {
            return Ok(x);
        }
        let gv = DVector::from_column_slice(&g);
        let mut dir: Vec<f64> = match p.hessian(&x)?.cholesky() {
            Some(ch) => (-ch.solve(&gv)).as_slice().to_vec(),
            None => g.iter().map(|a| -a).collect(),
        };
        let mut slope: f64 = dir.iter().zip(&g).map(|(a, b)| a * b).sum();
        if !(slope < 0.0) {
            dir = g.iter().map(|a| -a).collect();
            slope = -gn * gn;
        }
        let mut accepted = false;
        let mut t = 1.0;
        // Once the predicted decrease is below the rounding level of `f`, the
        // Armijo test accepts steps that make no progress; skip to the
        // gradient-norm test instead.
        let resolvable = -slope > 1e-12 * f.abs().max(1.0);
        for _ in 0..if resolvable { 60 } else { 0 } {
            for k in 0..d {
                x_new[k] = x[k] + t * dir[k];
            }
            let f_new = p.value(&x_new)?;
            if f_new.is_finite() && f_new <= f + 1e-4 * t * slope {
                f = f_new;
                accepted = true;
                break;
            }
            t *= 0.5;
        }
        if !accepted {
            // Accept the full step if it still reduces the gradient norm.
            for k in 0..d {
                x_new[k] = x[k] + dir[k];
            }
            let g_new = p.grad_vec(&x_new)?;
            if norm(&g_new) < gn {
                f = p.value(&x_new)?;
            } else {
                return Err(Error::NoConvergence {
                    iterations: opts.max_iter,
                    grad_norm: gn,
                });
            }
        }
        std::mem::swap(&mut x, &mut x_new);
        g = p.grad_vec(&x)?;
        if !f.is_finite() || !g.iter().all(|a| a.is_finite()) {
            return Err(Error::non_finite("potential during optimization"));
        }
    }
    let gn = norm(&g);
    if gn <= tol {
        Ok(x)
    } else {
        Err(Error::NoConvergence {
            iterations: opts.max_iter,
            grad_norm: gn,
        })
    }
}
