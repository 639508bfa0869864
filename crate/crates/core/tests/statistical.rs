use std::sync::Arc;

use nalgebra::DMatrix;
use ububu::diagnostics::{mean, sample_variance, variance_breakdown};
use ububu::estimator::{run_estimator, run_ububu};
use ububu::models::toy::PerturbedGaussian;
use ububu::models::{find_map, precondition, GaussianApprox, Potential};
use ububu::noise::derive_seed;
use ububu::{EstimatorReport, GradientMode, RunConfig, TestFunctionSet};

fn runs<P: Potential + ?Sized>(p: &P, approx: &GaussianApprox, cfg: &RunConfig, fset: &TestFunctionSet, r: u64) -> Vec<EstimatorReport> {
    (0..r)
        .map(|i| {
            let mut c = cfg.clone();
            c.seed = derive_seed(cfg.seed, i);
            run_estimator(p, approx, &c, fset).unwrap()
        })
        .collect()
}

fn perturbed() -> (PerturbedGaussian, GaussianApprox, RunConfig) {
    let p = PerturbedGaussian::new(vec![1.0, 4.0], 2.0);
    let x_star = find_map(&p, &[0.0, 0.0]).unwrap();
    let approx = p.gaussian_approx_at(&x_star).unwrap();
    let mut cfg = RunConfig::with_defaults(GradientMode::Exact, 0.5, 1.0, approx.m(), approx.big_m(), 0);
    cfg.n = 16;
    cfg.seed = 42;
    (p, approx, cfg)
}

#[test]
fn exact_mode_is_unbiased_on_a_non_gaussian_target() {
    let (p, approx, cfg) = perturbed();
    let fset = TestFunctionSet::coordinates(2).with_squares();
    let reports = runs(&p, &approx, &cfg, &fset, 200);
    let mut level0_bias = 0.0f64;
    for k in 0..2 {
        let (m1, m2) = p.marginal_moments(k);
        for (i, truth) in [(k, m1), (k + 2, m2)] {
            let xs: Vec<f64> = reports.iter().map(|r| r.estimate()[i]).collect();
            let se = (sample_variance(&xs).unwrap() / xs.len() as f64).sqrt();
            let z = (mean(&xs) - truth) / se;
            assert!(z.abs() < 4.0, "{}: mean {} truth {truth} z {z}", fset.names()[i], mean(&xs));
            let s0: Vec<f64> = reports.iter().map(|r| r.components.s0[i]).collect();
            let z0 = (mean(&s0) - truth) / (sample_variance(&s0).unwrap() / s0.len() as f64).sqrt();
            level0_bias = level0_bias.max(z0.abs());
        }
    }
    // The level-0 average alone is visibly biased, so the test has power.
    assert!(level0_bias > 8.0, "{level0_bias}");
}

#[test]
fn breakdown_is_reproduced_from_persisted_reports() {
    let (p, approx, cfg) = perturbed();
    let fset = TestFunctionSet::coordinates(2).with_squares();
    let reports = runs(&p, &approx, &cfg, &fset, 8);
    let json = serde_json::to_string(&reports).unwrap();
    let back: Vec<EstimatorReport> = serde_json::from_str(&json).unwrap();
    assert_eq!(back, reports);
    let a = variance_breakdown(&reports.iter().collect::<Vec<_>>()).unwrap();
    let b = variance_breakdown(&back.iter().collect::<Vec<_>>()).unwrap();
    assert_eq!(a, b);
    for (x, y) in a.total.iter().zip(&b.total) {
        assert_eq!(x.to_bits(), y.to_bits());
    }
    for r in &back {
        let s = r.reassemble(r.c_r).unwrap();
        assert_eq!(s.estimate, r.components.estimate);
    }
}

#[test]
fn preconditioned_target_has_unit_curvature_and_correct_moments() {
    let h = DMatrix::from_row_slice(3, 3, &[4.0, 1.0, 0.5, 1.0, 3.0, -0.4, 0.5, -0.4, 1.5]);
    let center = vec![1.0, -2.0, 0.5];
    let base = GaussianApprox::from_hessian(center.clone(), h.clone()).unwrap();
    let target = GaussianQuadratic { approx: base.clone() };
    let pre = precondition(target, base.clone());
    let y = vec![0.3, -0.1, 0.7];
    let hy = pre.hessian(&y).unwrap();
    for i in 0..3 {
        for j in 0..3 {
            let e = if i == j { 1.0 } else { 0.0 };
            assert!((hy[(i, j)] - e).abs() < 1e-10, "{hy}");
        }
    }
    let unit = GaussianApprox::diagonal(vec![0.0; 3], vec![1.0; 3]).unwrap();
    let mut cfg = RunConfig::with_defaults(GradientMode::Exact, 1.0, 1.0, 1.0, 1.0, 0);
    cfg.n = 16;
    cfg.seed = 7;
    let fset = TestFunctionSet::coordinates(3).with_transform(Arc::new(base.clone())).with_squares();
    let reports = runs(&pre, &unit, &cfg, &fset, 100);
    let cov = h.try_inverse().unwrap();
    for k in 0..3 {
        for (i, truth) in [(k, center[k]), (k + 3, cov[(k, k)] + center[k] * center[k])] {
            let xs: Vec<f64> = reports.iter().map(|r| r.estimate()[i]).collect();
            let se = (sample_variance(&xs).unwrap() / xs.len() as f64).sqrt();
            let z = (mean(&xs) - truth) / se;
            assert!(z.abs() < 4.0, "{}: mean {} truth {truth} z {z}", fset.names()[i], mean(&xs));
        }
    }
}

#[test]
fn reports_do_not_depend_on_thread_count() {
    let (p, approx, cfg) = perturbed();
    let fset = TestFunctionSet::coordinates(2).with_squares();
    let run = |threads: usize| {
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .unwrap()
            .install(|| run_ububu(&p, &approx, &cfg, &fset).unwrap())
    };
    let one = run(1);
    let three = run(3);
    assert_eq!(one, three);
    assert_eq!(serde_json::to_string(&one).unwrap(), serde_json::to_string(&three).unwrap());
}

/// `U(x) = ½ (x − c)ᵀ H (x − c)` with a full Hessian.
struct GaussianQuadratic {
    approx: GaussianApprox,
}

impl Potential for GaussianQuadratic {
    fn dim(&self) -> usize {
        self.approx.dim()
    }

    fn value(&self, x: &[f64]) -> ububu::Result<f64> {
        let dx: Vec<f64> = x.iter().zip(self.approx.center()).map(|(a, c)| a - c).collect();
        let hd = self.approx.apply_hessian(&dx);
        Ok(0.5 * dx.iter().zip(&hd).map(|(a, b)| a * b).sum::<f64>())
    }

    fn grad(&self, x: &[f64], out: &mut [f64]) -> ububu::Result<()> {
        let dx: Vec<f64> = x.iter().zip(self.approx.center()).map(|(a, c)| a - c).collect();
        out.copy_from_slice(&self.approx.apply_hessian(&dx));
        Ok(())
    }

    fn hessian(&self, _: &[f64]) -> ububu::Result<DMatrix<f64>> {
        Ok(self.approx.hessian_matrix())
    }

    fn add_grad_component(&self, i: usize, x: &[f64], scale: f64, out: &mut [f64]) -> ububu::Result<()> {
        assert_eq!(i, 0);
        let mut g = vec![0.0; x.len()];
        self.grad(x, &mut g)?;
        out.iter_mut().zip(g).for_each(|(o, v)| *o += scale * v);
        Ok(())
    }
}
