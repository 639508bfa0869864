//! Experiment configuration files (TOML).

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use ububu::config::{GradientMode, InitDistribution, RunConfig};
use ububu::rhmc::{RhmcConfig, DEFAULT_ALPHA};
use ububu::strong_order::StrongKernel;

use crate::error::{CliError, CliResult};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Experiment id written into every result row; defaults to the file stem.
    #[serde(default)]
    pub name: Option<String>,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub output: Option<PathBuf>,
    pub model: ModelSection,
    #[serde(default)]
    pub sampler: SamplerSection,
    #[serde(default)]
    pub diagnostics: DiagnosticsSection,
    #[serde(default)]
    pub strong_order: Option<StrongOrderSection>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum ModelSection {
    Gaussian(GaussianModel),
    Multinomial(MultinomialModel),
    Mnist(MnistModel),
    Soccer(SoccerModel),
    Matches(MatchesModel),
}

/// Diagonal Gaussian with eigenvalues evenly spaced over `[1, κ]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GaussianModel {
    pub d: usize,
    #[serde(default = "one")]
    pub kappa: f64,
    /// Number of data terms the precision is split into; 0 keeps it whole.
    #[serde(default)]
    pub n_data: usize,
}

/// Synthetic multinomial regression data drawn from the prior.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MultinomialModel {
    #[serde(default = "default_classes")]
    pub classes: usize,
    /// Covariate dimension including the intercept.
    #[serde(default = "default_d0")]
    pub d0: usize,
    #[serde(default = "default_n_data")]
    pub n_data: usize,
    #[serde(default = "default_prior_variance")]
    pub sigma0_sq: f64,
    /// Seed of the data generator; defaults to the experiment seed.
    #[serde(default)]
    pub data_seed: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MnistModel {
    pub images: PathBuf,
    pub labels: PathBuf,
    #[serde(default = "default_n_data")]
    pub subsample: usize,
    /// Mean-pooling block size; 4 maps 28×28 to 7×7.
    #[serde(default = "default_downscale")]
    pub downscale: usize,
    #[serde(default = "default_prior_variance")]
    pub sigma0_sq: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SoccerModel {
    #[serde(default = "default_teams")]
    pub teams: usize,
    #[serde(default = "default_rounds")]
    pub rounds: usize,
    #[serde(default = "default_rw_variance")]
    pub sigma_sq: f64,
    #[serde(default = "default_marginal_variance")]
    pub sigma0_sq: f64,
    #[serde(default)]
    pub data_seed: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MatchesModel {
    pub path: PathBuf,
    #[serde(default = "default_rw_variance")]
    pub sigma_sq: f64,
    #[serde(default = "default_marginal_variance")]
    pub sigma0_sq: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum SamplerMode {
    #[default]
    Ububu,
    UbubuSg,
    UbubuApprox,
    Rhmc,
}

impl SamplerMode {
    pub fn gradient_mode(self) -> Option<GradientMode> {
        match self {
            SamplerMode::Ububu => Some(GradientMode::Exact),
            SamplerMode::UbubuSg => Some(GradientMode::Svrg),
            SamplerMode::UbubuApprox => Some(GradientMode::Approx),
            SamplerMode::Rhmc => None,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            SamplerMode::Ububu => "ububu",
            SamplerMode::UbubuSg => "ububu-sg",
            SamplerMode::UbubuApprox => "ububu-approx",
            SamplerMode::Rhmc => "rhmc",
        }
    }
}

/// Sampler settings. Unset numeric fields take model-dependent defaults:
/// `γ = √m`, `h0 = 1/√M`, burn-ins from the theoretical bounds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct SamplerSection {
    #[serde(default)]
    pub mode: SamplerMode,
    /// Sample `y = H*^{1/2}(x − x*)` instead of `x`.
    #[serde(default)]
    pub precondition: bool,
    pub h0: Option<f64>,
    pub gamma: Option<f64>,
    pub b0: Option<usize>,
    pub b: Option<usize>,
    pub k: Option<usize>,
    pub n: Option<usize>,
    pub c_n: Option<f64>,
    pub phi_n: Option<f64>,
    pub c_r: Option<f64>,
    pub tau: Option<usize>,
    pub n_b: Option<usize>,
    /// Chain start; RHMC defaults to the Gaussian approximation on Gaussian
    /// targets and to MAP-Dirac otherwise.
    pub init: Option<InitDistribution>,
    #[serde(default)]
    pub rhmc: RhmcSection,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RhmcSection {
    /// Leapfrog stepsize; tuned when unset.
    pub h: Option<f64>,
    pub expected_l: Option<f64>,
    #[serde(default = "default_alpha")]
    pub alpha: f64,
    #[serde(default = "default_chain_steps")]
    pub steps: usize,
    #[serde(default = "default_rhmc_burn_in")]
    pub burn_in: usize,
    #[serde(default = "yes")]
    pub autotune: bool,
}

impl Default for RhmcSection {
    fn default() -> Self {
        RhmcSection {
            h: None,
            expected_l: None,
            alpha: DEFAULT_ALPHA,
            steps: default_chain_steps(),
            burn_in: default_rhmc_burn_in(),
            autotune: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DiagnosticsSection {
    /// Entries: `coordinates`, `coordinates:<n>` (first n), `x<i>` (1-based), `norm`.
    #[serde(default = "default_functions")]
    pub functions: Vec<String>,
    #[serde(default = "default_runs")]
    pub runs: usize,
    #[serde(default = "default_bootstrap")]
    pub bootstrap: usize,
}

impl Default for DiagnosticsSection {
    fn default() -> Self {
        DiagnosticsSection {
            functions: default_functions(),
            runs: default_runs(),
            bootstrap: default_bootstrap(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StrongOrderSection {
    pub kernel: StrongKernel,
    pub hs: Vec<f64>,
    pub horizon: f64,
    #[serde(default = "default_replicates")]
    pub replicates: usize,
    pub gamma: Option<f64>,
    pub n_b: Option<usize>,
    pub tau: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum FunctionSpec {
    /// First `n` coordinates, or all of them.
    Coordinates(Option<usize>),
    /// 0-based coordinate.
    Coordinate(usize),
    Norm,
}

impl FunctionSpec {
    pub fn parse(s: &str) -> CliResult<Self> {
        let bad = || CliError::Config(format!("diagnostics.functions: unrecognised entry {s:?}"));
        if s == "norm" {
            return Ok(FunctionSpec::Norm);
        }
        if s == "coordinates" {
            return Ok(FunctionSpec::Coordinates(None));
        }
        if let Some(n) = s.strip_prefix("coordinates:") {
            let n: usize = n.parse().map_err(|_| bad())?;
            if n == 0 {
                return Err(bad());
            }
            return Ok(FunctionSpec::Coordinates(Some(n)));
        }
        if let Some(i) = s.strip_prefix('x') {
            let i: usize = i.parse().map_err(|_| bad())?;
            if i == 0 {
                return Err(bad());
            }
            return Ok(FunctionSpec::Coordinate(i - 1));
        }
        Err(bad())
    }
}

impl ExperimentConfig {
    /// Parses and validates a config file; relative data paths are resolved
    /// against the file's directory.
    pub fn load(path: &Path) -> CliResult<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        let mut cfg = Self::parse(&text)?;
        if cfg.name.is_none() {
            cfg.name = path.file_stem().map(|s| s.to_string_lossy().into_owned());
        }
        let base = path.parent().unwrap_or(Path::new("."));
        cfg.resolve_paths(base);
        Ok(cfg)
    }

    pub fn parse(text: &str) -> CliResult<Self> {
        let cfg: ExperimentConfig = toml::from_str(text).map_err(|e| CliError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        match &mut self.model {
            ModelSection::Mnist(m) => {
                fix(&mut m.images);
                fix(&mut m.labels);
            }
            ModelSection::Matches(m) => fix(&mut m.path),
            _ => {}
        }
    }

    pub fn experiment_id(&self) -> &str {
        self.name.as_deref().unwrap_or("experiment")
    }

    /// SHA-256 of the effective configuration, output directory excluded.
    pub fn hash(&self) -> String {
        let mut c = self.clone();
        c.output = None;
        let canonical = serde_json::to_string(&c).expect("config serializes");
        hex::encode(Sha256::digest(canonical.as_bytes()))
    }

    pub fn functions(&self) -> CliResult<Vec<FunctionSpec>> {
        self.diagnostics.functions.iter().map(|s| FunctionSpec::parse(s)).collect()
    }

    pub fn validate(&self) -> CliResult<()> {
        self.validate_model()?;
        self.sampler.validate()?;
        let d = &self.diagnostics;
        if d.functions.is_empty() {
            return Err(CliError::Config("diagnostics.functions: must not be empty".into()));
        }
        self.functions()?;
        if d.runs < 2 {
            return Err(CliError::Config(format!("diagnostics.runs: need at least 2, got {}", d.runs)));
        }
        if d.bootstrap > 0 && d.runs < 8 {
            return Err(CliError::Config(format!(
                "diagnostics.runs: bootstrap intervals need at least 8 runs, got {}",
                d.runs
            )));
        }
        if let Some(s) = &self.strong_order {
            s.validate()?;
        }
        Ok(())
    }

    fn validate_model(&self) -> CliResult<()> {
        let err = |field: &str, reason: String| Err(CliError::Config(format!("model.{field}: {reason}")));
        let positive = |field: &str, v: f64| {
            if v > 0.0 && v.is_finite() {
                Ok(())
            } else {
                err(field, format!("must be positive, got {v}"))
            }
        };
        match &self.model {
            ModelSection::Gaussian(g) => {
                if g.d == 0 {
                    return err("d", "must be at least 1".into());
                }
                if !(g.kappa >= 1.0 && g.kappa.is_finite()) {
                    return err("kappa", format!("must be at least 1, got {}", g.kappa));
                }
            }
            ModelSection::Multinomial(m) => {
                if m.classes < 2 {
                    return err("classes", format!("need at least 2, got {}", m.classes));
                }
                if m.d0 < 1 {
                    return err("d0", "must be at least 1".into());
                }
                if m.n_data < 1 {
                    return err("n_data", "must be at least 1".into());
                }
                positive("sigma0_sq", m.sigma0_sq)?;
            }
            ModelSection::Mnist(m) => {
                if m.subsample < 1 {
                    return err("subsample", "must be at least 1".into());
                }
                if m.downscale < 1 {
                    return err("downscale", "must be at least 1".into());
                }
                positive("sigma0_sq", m.sigma0_sq)?;
            }
            ModelSection::Soccer(s) => {
                if s.teams < 2 {
                    return err("teams", format!("need at least 2, got {}", s.teams));
                }
                if s.rounds < 1 {
                    return err("rounds", "must be at least 1".into());
                }
                positive("sigma_sq", s.sigma_sq)?;
                positive("sigma0_sq", s.sigma0_sq)?;
            }
            ModelSection::Matches(m) => {
                positive("sigma_sq", m.sigma_sq)?;
                positive("sigma0_sq", m.sigma0_sq)?;
            }
        }
        Ok(())
    }
}

impl SamplerSection {
    /// Applies the explicit fields over `base` (which carries the model defaults).
    pub fn apply(&self, mut base: RunConfig) -> RunConfig {
        macro_rules! set {
            ($($f:ident),*) => {$( if let Some(v) = self.$f { base.$f = v; } )*};
        }
        set!(h0, gamma, b0, b, k, n, c_n, phi_n, c_r, tau, n_b, init);
        base
    }

    /// Checks every explicit field against the run-config constraints
    /// before the model is built.
    pub fn validate(&self) -> CliResult<()> {
        let field_err = |e: ububu::Error| match e {
            ububu::Error::InvalidConfig { field, reason } => CliError::Config(format!("sampler.{field}: {reason}")),
            other => CliError::Config(other.to_string()),
        };
        let mode = self.mode.gradient_mode().unwrap_or(GradientMode::Exact);
        let probe = RunConfig::with_defaults(mode, 0.1, 1.0, 1.0, 1.0, 1);
        self.apply(probe).validate().map_err(field_err)?;
        if self.mode == SamplerMode::Rhmc {
            let r = &self.rhmc;
            let mut probe = RhmcConfig::new(r.h.unwrap_or(0.1), r.expected_l.unwrap_or(1.0));
            probe.alpha = r.alpha;
            probe.k = r.steps;
            probe.burn_in = r.burn_in;
            probe.validate().map_err(|e| match e {
                ububu::Error::InvalidConfig { field, reason } => {
                    CliError::Config(format!("sampler.rhmc.{field}: {reason}"))
                }
                other => CliError::Config(other.to_string()),
            })?;
        }
        Ok(())
    }
}

impl StrongOrderSection {
    pub fn validate(&self) -> CliResult<()> {
        let err = |field: &str, reason: String| Err(CliError::Config(format!("strong_order.{field}: {reason}")));
        if self.hs.len() < 4 {
            return err("hs", format!("need at least 4 stepsizes, got {}", self.hs.len()));
        }
        if self.hs.iter().any(|h| !(*h > 0.0 && h.is_finite())) {
            return err("hs", "stepsizes must be positive".into());
        }
        if !(self.horizon > 0.0 && self.horizon.is_finite()) {
            return err("horizon", format!("must be positive, got {}", self.horizon));
        }
        if self.replicates < 1 {
            return err("replicates", "must be at least 1".into());
        }
        if let Some(g) = self.gamma {
            if !(g > 0.0 && g.is_finite()) {
                return err("gamma", format!("must be positive, got {g}"));
            }
        }
        if let Some(t) = self.tau {
            if t < 2 || t % 2 != 0 {
                return err("tau", format!("must be even and at least 2, got {t}"));
            }
        }
        if self.n_b == Some(0) {
            return err("n_b", "must be at least 1".into());
        }
        Ok(())
    }
}

fn one() -> f64 {
    1.0
}
fn yes() -> bool {
    true
}
fn default_classes() -> usize {
    10
}
fn default_d0() -> usize {
    50
}
fn default_n_data() -> usize {
    2000
}
fn default_downscale() -> usize {
    4
}
fn default_teams() -> usize {
    8
}
fn default_rounds() -> usize {
    20
}
fn default_prior_variance() -> f64 {
    ububu::models::multinomial::DEFAULT_PRIOR_VARIANCE
}
fn default_rw_variance() -> f64 {
    ububu::models::poisson::DEFAULT_RW_VARIANCE
}
fn default_marginal_variance() -> f64 {
    ububu::models::poisson::DEFAULT_MARGINAL_VARIANCE
}
fn default_alpha() -> f64 {
    DEFAULT_ALPHA
}
fn default_chain_steps() -> usize {
    1000
}
fn default_rhmc_burn_in() -> usize {
    200
}
fn default_functions() -> Vec<String> {
    vec!["coordinates".into(), "norm".into()]
}
fn default_runs() -> usize {
    48
}
fn default_bootstrap() -> usize {
    2000
}
fn default_replicates() -> usize {
    200
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = "[model]\nkind = \"gaussian\"\nd = 3\n";

    #[test]
    fn minimal_config_defaults() {
        let c = ExperimentConfig::parse(MINIMAL).unwrap();
        assert_eq!(c.sampler.mode, SamplerMode::Ububu);
        assert_eq!(c.diagnostics.runs, 48);
        assert_eq!(c.functions().unwrap(), vec![FunctionSpec::Coordinates(None), FunctionSpec::Norm]);
    }

    #[test]
    fn unknown_keys_rejected() {
        for text in [
            format!("{MINIMAL}colour = 3\n"),
            "[model]\nkind = \"gaussian\"\nd = 3\nbogus = 1\n".to_string(),
            format!("{MINIMAL}[sampler]\nh = 0.1\n"),
            format!("{MINIMAL}[diagnostics]\nrun = 3\n"),
        ] {
            assert!(ExperimentConfig::parse(&text).is_err(), "{text}");
        }
    }

    #[test]
    fn c_r_out_of_range_names_field() {
        let text = format!("{MINIMAL}[sampler]\nc_r = 0.9\n");
        let e = ExperimentConfig::parse(&text).unwrap_err().to_string();
        assert!(e.contains("sampler.c_r"), "{e}");
    }

    #[test]
    fn each_run_config_violation_is_named() {
        let cases = [
            ("h0 = -1.0", "sampler.h0"),
            ("gamma = 0.0", "sampler.gamma"),
            ("k = 0", "sampler.k"),
            ("n = 0", "sampler.n"),
            ("c_n = 0.0", "sampler.c_n"),
            ("phi_n = 1.5", "sampler.phi_n"),
            ("c_r = -0.1", "sampler.c_r"),
            ("mode = \"ububu-sg\"\ntau = 3", "sampler.tau"),
            ("mode = \"ububu-sg\"\nn_b = 0\ntau = 4", "sampler.n_b"),
        ];
        for (line, field) in cases {
            let text = format!("{MINIMAL}[sampler]\n{line}\n");
            let e = ExperimentConfig::parse(&text).unwrap_err().to_string();
            assert!(e.contains(field), "{line}: {e}");
        }
    }

    #[test]
    fn function_specs() {
        assert_eq!(FunctionSpec::parse("x3").unwrap(), FunctionSpec::Coordinate(2));
        assert_eq!(FunctionSpec::parse("coordinates:5").unwrap(), FunctionSpec::Coordinates(Some(5)));
        for bad in ["x0", "y1", "coordinates:0", "coordinates:a"] {
            assert!(FunctionSpec::parse(bad).is_err());
        }
    }

    #[test]
    fn hash_ignores_output_but_not_seed() {
        let a = ExperimentConfig::parse(MINIMAL).unwrap();
        let mut b = a.clone();
        b.output = Some("elsewhere".into());
        assert_eq!(a.hash(), b.hash());
        b.seed = 7;
        assert_ne!(a.hash(), b.hash());
    }

    #[test]
    fn model_kinds_parse() {
        let text = "[model]\nkind = \"soccer\"\nteams = 4\nrounds = 6\n";
        let c = ExperimentConfig::parse(text).unwrap();
        assert!(matches!(c.model, ModelSection::Soccer(SoccerModel { teams: 4, rounds: 6, .. })));
        let text = "[model]\nkind = \"mnist\"\nimages = \"i\"\nlabels = \"l\"\n";
        let c = ExperimentConfig::parse(text).unwrap();
        assert!(matches!(c.model, ModelSection::Mnist(MnistModel { downscale: 4, subsample: 2000, .. })));
    }
}
