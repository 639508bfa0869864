//! Phase-space states and the weighted norm used for contraction statements.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Position-velocity pair `z = (x, v)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhaseState {
    pub x: Vec<f64>,
    pub v: Vec<f64>,
}

impl PhaseState {
    pub fn new(x: Vec<f64>, v: Vec<f64>) -> Result<Self> {
        if x.is_empty() {
            return Err(Error::InvalidInput("phase state must have d >= 1".into()));
        }
        if x.len() != v.len() {
            return Err(Error::DimensionMismatch {
                expected: x.len(),
                got: v.len(),
            });
        }
        let s = PhaseState { x, v };
        if !s.is_finite() {
            return Err(Error::non_finite("phase state"));
        }
        Ok(s)
    }

    pub fn zeros(d: usize) -> Self {
        PhaseState {
            x: vec![0.0; d],
            v: vec![0.0; d],
        }
    }

    pub fn dim(&self) -> usize {
        self.x.len()
    }

    pub fn is_finite(&self) -> bool {
        self.x.iter().chain(self.v.iter()).all(|a| a.is_finite())
    }

    /// Euclidean distance in R^{2d}.
    pub fn distance(&self, other: &PhaseState) -> f64 {
        let dx: f64 = self.x.iter().zip(&other.x).map(|(a, b)| (a - b).powi(2)).sum();
        let dv: f64 = self.v.iter().zip(&other.v).map(|(a, b)| (a - b).powi(2)).sum();
        (dx + dv).sqrt()
    }
}

/// Parameters `(a, b)` of `‖z‖²_{a,b} = ‖x‖² + 2b⟨x,v⟩ + a‖v‖²`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WeightedNormParams {
    pub a: f64,
    pub b: f64,
}

impl WeightedNormParams {
    pub fn new(a: f64, b: f64) -> Result<Self> {
        if !(a > 0.0) || !(b > 0.0) {
            return Err(Error::InvalidInput("weighted norm needs a, b > 0".into()));
        }
        if b * b >= a {
            return Err(Error::InvalidInput(format!(
                "weighted norm needs b^2 < a (a={a}, b={b})"
            )));
        }
        Ok(WeightedNormParams { a, b })
    }

    /// `a = 1/M`, `b = 1/γ`.
    pub fn from_tuning(big_m: f64, gamma: f64) -> Result<Self> {
        Self::new(1.0 / big_m, 1.0 / gamma)
    }
}

pub fn weighted_norm_sq(z: &PhaseState, p: &WeightedNormParams) -> Result<f64> {
    if z.x.len() != z.v.len() {
        return Err(Error::DimensionMismatch {
            expected: z.x.len(),
            got: z.v.len(),
        });
    }
    let mut xx = 0.0;
    let mut xv = 0.0;
    let mut vv = 0.0;
    for (x, v) in z.x.iter().zip(&z.v) {
        xx += x * x;
        xv += x * v;
        vv += v * v;
    }
    Ok(xx + 2.0 * p.b * xv + p.a * vv)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn z(x: &[f64], v: &[f64]) -> PhaseState {
        PhaseState::new(x.to_vec(), v.to_vec()).unwrap()
    }

    #[test]
    fn zero_state_has_zero_norm() {
        let p = WeightedNormParams::new(2.0, 0.3).unwrap();
        assert_eq!(weighted_norm_sq(&PhaseState::zeros(3), &p).unwrap(), 0.0);
    }

    #[test]
    fn zero_velocity_reduces_to_euclidean() {
        let p = WeightedNormParams::new(1.0, 0.5).unwrap();
        assert_eq!(weighted_norm_sq(&z(&[1.0], &[0.0]), &p).unwrap(), 1.0);
    }

    #[test]
    fn direct_substitution() {
        let p = WeightedNormParams::new(1.0, 0.25).unwrap();
        let n = weighted_norm_sq(&z(&[1.0], &[2.0]), &p).unwrap();
        assert!((n - 6.0).abs() < 1e-15);
    }

    #[test]
    fn mismatched_lengths_rejected() {
        assert!(PhaseState::new(vec![1.0], vec![1.0, 2.0]).is_err());
        let bad = PhaseState {
            x: vec![1.0],
            v: vec![],
        };
        let p = WeightedNormParams::new(1.0, 0.1).unwrap();
        assert!(weighted_norm_sq(&bad, &p).is_err());
    }

    #[test]
    fn invalid_params_rejected() {
        assert!(WeightedNormParams::new(1.0, 1.0).is_err());
        assert!(WeightedNormParams::new(-1.0, 0.1).is_err());
    }

    proptest! {
        #[test]
        fn norm_equivalence(
            xs in proptest::collection::vec(-10.0f64..10.0, 1..6),
            vs_seed in proptest::collection::vec(-10.0f64..10.0, 6),
            a in 0.01f64..10.0,
            frac in 0.0f64..1.0,
        ) {
            let b = frac * (a / 4.0).sqrt();
            prop_assume!(b > 0.0);
            let vs: Vec<f64> = vs_seed[..xs.len()].to_vec();
            let p = WeightedNormParams::new(a, b).unwrap();
            let s = z(&xs, &vs);
            let lhs = weighted_norm_sq(&s, &p).unwrap();
            let e: f64 = xs.iter().chain(vs.iter()).map(|t| t * t).sum();
            prop_assert!(lhs >= 0.5 * a.min(1.0) * e - 1e-9 * (1.0 + e));
        }
    }
}
