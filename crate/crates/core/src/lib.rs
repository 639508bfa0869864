//! Unbiased multilevel kinetic Langevin Monte Carlo.
//!
//! The crate provides the UBU splitting integrator and its couplings across
//! stepsize levels, a randomized multilevel estimator built on top of them
//! (with exact, SVRG, and quadratic-approximate gradients), a randomized HMC
//! baseline, target models, and variance/ESS diagnostics.
//!
//! All randomness is addressed through [`noise::NoiseKey`], so every run is a
//! pure function of its seed and configuration.

pub mod config;
pub mod couplings;
pub mod diagnostics;
pub mod error;
pub mod estimator;
pub mod inexact;
pub mod integrators;
pub mod models;
pub mod noise;
pub mod observables;
pub mod rhmc;
pub mod state;
pub mod strong_order;

pub use config::{GradientMode, InitDistribution, RunConfig};
pub use error::{Error, Result};
pub use estimator::{EstimatorReport, LevelSchedule};
pub use models::{GaussianApprox, Potential};
pub use noise::{NoiseKey, Stream};
pub use observables::{TestFunction, TestFunctionSet};
pub use state::{PhaseState, WeightedNormParams};
