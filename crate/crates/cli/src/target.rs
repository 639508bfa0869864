//! Builds the posterior named by the model section and its Gaussian approximation.

use std::sync::Arc;

use ububu::models::synthetic::{synthetic_multinomial, synthetic_soccer};
use ububu::models::{find_map, precondition, GaussianApprox, GaussianTarget};
use ububu::observables::{TestFunction, TestFunctionSet};
use ububu::Potential;

use crate::config::{ExperimentConfig, FunctionSpec, ModelSection};
use crate::error::{CliError, CliResult, CoreContext};
use crate::ingest::{ingest_matches, ingest_mnist};

pub struct Target {
    pub kind: &'static str,
    pub base: Box<dyn Potential>,
    /// Gaussian approximation of `base` at its mode.
    pub approx: GaussianApprox,
    /// Hash of ingested data files, when the model reads any.
    pub dataset_hash: Option<String>,
}

impl Target {
    pub fn build(cfg: &ExperimentConfig) -> CliResult<Self> {
        let (kind, base, dataset_hash): (&'static str, Box<dyn Potential>, Option<String>) = match &cfg.model {
            ModelSection::Gaussian(g) => (
                "gaussian",
                Box::new(GaussianTarget::split(g.d, g.kappa, g.n_data).during("build_model")?),
                None,
            ),
            ModelSection::Multinomial(m) => {
                let s = synthetic_multinomial(m.classes, m.d0, m.n_data, m.sigma0_sq, m.data_seed.unwrap_or(cfg.seed))
                    .during("build_model")?;
                ("multinomial", Box::new(s.model), None)
            }
            ModelSection::Mnist(m) => {
                let data = ingest_mnist(&m.images, &m.labels, m.subsample, m.downscale)?;
                let hash = data.hash();
                ("mnist", Box::new(data.model(m.sigma0_sq)?), Some(hash))
            }
            ModelSection::Soccer(s) => {
                let syn = synthetic_soccer(s.teams, s.rounds, s.sigma_sq, s.sigma0_sq, s.data_seed.unwrap_or(cfg.seed))
                    .during("build_model")?;
                ("soccer", Box::new(syn.model), None)
            }
            ModelSection::Matches(m) => {
                let data = ingest_matches(&m.path)?;
                let hash = data.hash();
                ("matches", Box::new(data.model(m.sigma_sq, m.sigma0_sq)?), Some(hash))
            }
        };
        let x_star = find_map(&*base, &vec![0.0; base.dim()]).during("find_map")?;
        let approx = base.gaussian_approx_at(&x_star).during("gaussian_approx")?;
        Ok(Target {
            kind,
            base,
            approx,
            dataset_hash,
        })
    }

    pub fn dim(&self) -> usize {
        self.base.dim()
    }

    /// Condition number `M/m` of the Hessian at the mode.
    pub fn kappa(&self) -> f64 {
        self.approx.big_m() / self.approx.m()
    }

    /// Calls `f` with the potential to sample, its Gaussian approximation,
    /// and the map back to original coordinates when preconditioning.
    pub fn with_sampling<R>(
        &self,
        preconditioned: bool,
        f: impl FnOnce(&dyn Potential, &GaussianApprox, Option<Arc<GaussianApprox>>) -> CliResult<R>,
    ) -> CliResult<R> {
        if preconditioned {
            let d = self.dim();
            let pre = precondition(&*self.base, self.approx.clone());
            let unit = GaussianApprox::diagonal(vec![0.0; d], vec![1.0; d]).during("precondition")?;
            f(&pre, &unit, Some(Arc::new(self.approx.clone())))
        } else {
            f(&*self.base, &self.approx, None)
        }
    }
}

/// Named test functions in original coordinates, squares appended.
pub fn function_set(
    specs: &[FunctionSpec],
    d: usize,
    transform: Option<Arc<GaussianApprox>>,
) -> CliResult<TestFunctionSet> {
    let mut set = TestFunctionSet::new();
    for s in specs {
        match *s {
            FunctionSpec::Coordinates(n) => {
                let n = n.unwrap_or(d);
                if n > d {
                    return Err(CliError::Config(format!(
                        "diagnostics.functions: coordinates:{n} exceeds dimension {d}"
                    )));
                }
                for i in 0..n {
                    set = set.push(format!("x{}", i + 1), TestFunction::Coordinate(i));
                }
            }
            FunctionSpec::Coordinate(i) => {
                if i >= d {
                    return Err(CliError::Config(format!(
                        "diagnostics.functions: x{} exceeds dimension {d}",
                        i + 1
                    )));
                }
                set = set.push(format!("x{}", i + 1), TestFunction::Coordinate(i));
            }
            FunctionSpec::Norm => set = set.push("norm", TestFunction::Norm),
        }
    }
    if let Some(t) = transform {
        set = set.with_transform(t);
    }
    Ok(set.with_squares())
}
