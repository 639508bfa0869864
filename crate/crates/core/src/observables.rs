//! Test functions evaluated on recorded positions.

use std::fmt;
use std::sync::Arc;

use crate::models::GaussianApprox;

pub type CustomFn = Arc<dyn Fn(&[f64]) -> f64 + Send + Sync>;

#[derive(Clone)]
pub enum TestFunction {
    /// `f(x) = x_i`.
    Coordinate(usize),
    /// `f(x) = ‖x‖`.
    Norm,
    Custom(CustomFn),
    Squared(Box<TestFunction>),
}

impl fmt::Debug for TestFunction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TestFunction::Coordinate(i) => write!(f, "Coordinate({i})"),
            TestFunction::Norm => write!(f, "Norm"),
            TestFunction::Custom(_) => write!(f, "Custom"),
            TestFunction::Squared(inner) => write!(f, "Squared({inner:?})"),
        }
    }
}

impl TestFunction {
    pub fn eval(&self, x: &[f64]) -> f64 {
        match self {
            TestFunction::Coordinate(i) => x[*i],
            TestFunction::Norm => x.iter().map(|a| a * a).sum::<f64>().sqrt(),
            TestFunction::Custom(f) => f(x),
            TestFunction::Squared(inner) => inner.eval(x).powi(2),
        }
    }
}

/// An ordered, named set of test functions, optionally evaluated after the
/// affine map `x = x* + H*^{-1/2} y` back from preconditioned coordinates.
#[derive(Clone, Debug, Default)]
pub struct TestFunctionSet {
    names: Vec<String>,
    funcs: Vec<TestFunction>,
    square_of: Vec<Option<usize>>,
    transform: Option<Arc<GaussianApprox>>,
}

impl TestFunctionSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(mut self, name: impl Into<String>, f: TestFunction) -> Self {
        self.names.push(name.into());
        self.funcs.push(f);
        self.square_of.push(None);
        self
    }

    pub fn coordinates(d: usize) -> Self {
        (0..d).fold(Self::new(), |s, i| s.push(format!("x{}", i + 1), TestFunction::Coordinate(i)))
    }

    pub fn coordinates_and_norm(d: usize) -> Self {
        Self::coordinates(d).push("norm", TestFunction::Norm)
    }

    pub fn with_transform(mut self, approx: Arc<GaussianApprox>) -> Self {
        self.transform = Some(approx);
        self
    }

    /// Appends `f²` for every function so posterior variances can be estimated.
    pub fn with_squares(mut self) -> Self {
        let n = self.funcs.len();
        for i in 0..n {
            if self.square_of[i].is_some() || self.square_of.iter().any(|s| *s == Some(i)) {
                continue;
            }
            let name = format!("{}^2", self.names[i]);
            let f = TestFunction::Squared(Box::new(self.funcs[i].clone()));
            self.names.push(name);
            self.funcs.push(f);
            self.square_of.push(Some(i));
        }
        self
    }

    pub fn len(&self) -> usize {
        self.funcs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.funcs.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    /// Index of the entry holding `f_i²`, if present.
    pub fn square_index(&self, i: usize) -> Option<usize> {
        self.square_of.iter().position(|s| *s == Some(i))
    }

    /// Indices of functions that are not appended squares.
    pub fn primary_indices(&self) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.square_of[i].is_none()).collect()
    }

    pub fn map_position(&self, x: &[f64]) -> Vec<f64> {
        match &self.transform {
            None => x.to_vec(),
            Some(a) => {
                let mut y = a.apply_inv_sqrt(x);
                for (v, c) in y.iter_mut().zip(a.center()) {
                    *v += c;
                }
                y
            }
        }
    }

    /// Adds every function value at `x` into `acc`.
    pub fn accumulate(&self, x: &[f64], acc: &mut [f64]) {
        let y;
        let pos = match &self.transform {
            None => x,
            Some(_) => {
                y = self.map_position(x);
                &y
            }
        };
        for (a, f) in acc.iter_mut().zip(&self.funcs) {
            *a += f.eval(pos);
        }
    }

    pub fn evaluate(&self, x: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.len()];
        self.accumulate(x, &mut out);
        out
    }
}
