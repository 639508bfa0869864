use proptest::prelude::*;

use ububu::config::default_tau;
use ububu::couplings::{coarsen, m_transform};
use ububu::estimator::make_schedule;
use ububu::inexact::{svrg_ubu_step, AnchorState, WorkLedger};
use ububu::integrators::{u_step, ubu_step, OUStepCoeffs, Quad};
use ububu::models::synthetic::{synthetic_multinomial, synthetic_soccer};
use ububu::models::{GaussianTarget, Potential};
use ububu::noise::{draw_batch, draw_gaussians};
use ububu::{NoiseKey, PhaseState, Stream, TestFunctionSet};

fn quad(key: NoiseKey, d: usize) -> Quad {
    [
        draw_gaussians(key.slot(0), d),
        draw_gaussians(key.slot(1), d),
        draw_gaussians(key.slot(2), d),
        draw_gaussians(key.slot(3), d),
    ]
}

fn state(key: NoiseKey, d: usize, scale: f64) -> PhaseState {
    let x = draw_gaussians(key.slot(10), d).iter().map(|a| a * scale).collect();
    let v = draw_gaussians(key.slot(11), d).iter().map(|a| a * scale).collect();
    PhaseState { x, v }
}

fn close(a: &[f64], b: &[f64], tol: f64) -> bool {
    a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tol * (1.0 + x.abs().max(y.abs())))
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn merged_noise_reproduces_two_ou_steps(seed in 0u64..10_000, gamma in 0.1f64..5.0, s in 1e-3f64..1.0) {
        let key = NoiseKey::new(seed, Stream::Pair);
        let xi = quad(key, 3);
        let z0 = state(key, 3, 2.0);
        let c = OUStepCoeffs::new(gamma, s);
        let mut two = z0.clone();
        u_step(&mut two, &c, &xi[0], &xi[1]);
        u_step(&mut two, &c, &xi[2], &xi[3]);
        let (a, b) = m_transform(&xi, gamma, s).unwrap();
        let mut one = z0;
        u_step(&mut one, &OUStepCoeffs::new(gamma, 2.0 * s), &a, &b);
        prop_assert!(close(&one.x, &two.x, 1e-9), "{:?} vs {:?}", one.x, two.x);
        prop_assert!(close(&one.v, &two.v, 1e-9), "{:?} vs {:?}", one.v, two.v);
    }

    #[test]
    fn coarse_step_matches_fine_ou_flow(seed in 0u64..10_000, gamma in 0.1f64..5.0, h in 1e-2f64..1.0) {
        // With zero force UBU is the pure OU flow, so one coarse step must equal
        // two fine steps driven by the same Brownian path.
        let flat = GaussianTarget::from_diagonal(vec![0.0; 2]);
        let key = NoiseKey::new(seed, Stream::Pair);
        let octet = [quad(key.step(0), 2), quad(key.step(1), 2)];
        let z0 = state(key, 2, 1.0);
        let mut fine = z0.clone();
        ubu_step(&flat, &mut fine, h / 2.0, gamma, &octet[0]).unwrap();
        ubu_step(&flat, &mut fine, h / 2.0, gamma, &octet[1]).unwrap();
        let mut coarse = z0;
        ubu_step(&flat, &mut coarse, h, gamma, &coarsen(&octet, gamma, h).unwrap()).unwrap();
        prop_assert!(close(&coarse.x, &fine.x, 1e-9));
        prop_assert!(close(&coarse.v, &fine.v, 1e-9));
    }

    #[test]
    fn ou_step_is_affine(seed in 0u64..10_000, gamma in 0.1f64..5.0, s in 1e-3f64..2.0) {
        // U(z1) − U(z2) under shared noise equals the noiseless flow of z1 − z2.
        let key = NoiseKey::new(seed, Stream::Pair);
        let xi = quad(key, 4);
        let (z1, z2) = (state(key.step(1), 4, 3.0), state(key.step(2), 4, 3.0));
        let c = OUStepCoeffs::new(gamma, s);
        let (mut a, mut b) = (z1.clone(), z2.clone());
        u_step(&mut a, &c, &xi[0], &xi[1]);
        u_step(&mut b, &c, &xi[0], &xi[1]);
        let mut diff = PhaseState {
            x: z1.x.iter().zip(&z2.x).map(|(p, q)| p - q).collect(),
            v: z1.v.iter().zip(&z2.v).map(|(p, q)| p - q).collect(),
        };
        let zero = vec![0.0; 4];
        u_step(&mut diff, &c, &zero, &zero);
        let dx: Vec<f64> = a.x.iter().zip(&b.x).map(|(p, q)| p - q).collect();
        let dv: Vec<f64> = a.v.iter().zip(&b.v).map(|(p, q)| p - q).collect();
        prop_assert!(close(&dx, &diff.x, 1e-9));
        prop_assert!(close(&dv, &diff.v, 1e-9));
    }

    #[test]
    fn synchronous_ubu_contracts(seed in 0u64..10_000, kappa in 1.0f64..20.0) {
        let t = GaussianTarget::new(3, kappa).unwrap();
        let gamma = 2.0;
        let h = 0.5 / kappa.sqrt();
        let key = NoiseKey::new(seed, Stream::Pair);
        let (mut a, mut b) = (state(key.step(1), 3, 3.0), state(key.step(2), 3, 3.0));
        let d0 = a.distance(&b);
        let steps = (40.0 / h) as i64;
        for j in 0..steps {
            let xi = quad(key.step(100 + j), 3);
            ubu_step(&t, &mut a, h, gamma, &xi).unwrap();
            ubu_step(&t, &mut b, h, gamma, &xi).unwrap();
        }
        prop_assert!(a.distance(&b) < 1e-3 * d0, "{} -> {}", d0, a.distance(&b));
    }

    #[test]
    fn gradient_is_sum_of_components(seed in 0u64..1_000, n_data in 1usize..30) {
        let mult = synthetic_multinomial(3, 3, n_data, 0.5, seed).unwrap().model;
        let soccer = synthetic_soccer(4, 3, 0.01, 10.0, seed).unwrap().model;
        let split = GaussianTarget::split(3, 5.0, n_data).unwrap();
        let models: [&dyn Potential; 3] = [&mult, &soccer, &split];
        for p in models {
            let d = p.dim();
            let x: Vec<f64> = draw_gaussians(NoiseKey::new(seed, Stream::Init), d).iter().map(|a| 0.3 * a).collect();
            let mut total = vec![0.0; d];
            for i in 0..=p.n_data() {
                p.add_grad_component(i, &x, 1.0, &mut total).unwrap();
            }
            let g = p.grad_vec(&x).unwrap();
            prop_assert!(close(&total, &g, 1e-10), "{:?} vs {:?}", total, g);
        }
    }

    #[test]
    fn potentials_are_strongly_monotone(seed in 0u64..1_000) {
        let mult = synthetic_multinomial(3, 3, 20, 0.5, seed).unwrap().model;
        let soccer = synthetic_soccer(4, 3, 0.01, 10.0, seed).unwrap().model;
        let gauss = GaussianTarget::new(4, 10.0).unwrap();
        let models: [(&dyn Potential, f64); 3] = [(&mult, 1.0 / 0.5), (&soccer, 0.0), (&gauss, 1.0)];
        for (p, m) in models {
            let d = p.dim();
            let key = NoiseKey::new(seed, Stream::Init);
            let x = draw_gaussians(key.slot(0), d);
            let y = draw_gaussians(key.slot(1), d);
            let gx = p.grad_vec(&x).unwrap();
            let gy = p.grad_vec(&y).unwrap();
            let dx: Vec<f64> = x.iter().zip(&y).map(|(a, b)| a - b).collect();
            let dg: Vec<f64> = gx.iter().zip(&gy).map(|(a, b)| a - b).collect();
            prop_assert!(dot(&dg, &dx) >= m * dot(&dx, &dx) - 1e-9 * (1.0 + dot(&dx, &dx)));
            let ux = p.value(&x).unwrap();
            let uy = p.value(&y).unwrap();
            // U(y) ≥ U(x) + ⟨∇U(x), y − x⟩
            prop_assert!(uy >= ux - dot(&gx, &dx) - 1e-9 * (1.0 + ux.abs()));
        }
    }

    #[test]
    fn schedule_invariants(seed in 0u64..10_000, n in 1usize..5_000, c_n in 0.001f64..1.0, phi in 2.01f64..8.0) {
        let s = make_schedule(n, c_n, phi, NoiseKey::new(seed, Stream::Schedule)).unwrap();
        prop_assert!(s.rate(s.big_l) <= 1.0 + 1e-9);
        if s.big_l > 0 {
            prop_assert!(s.rate(s.big_l - 1) > 1.0);
        }
        for l in 0..s.big_l {
            prop_assert_eq!(f64::from(s.count(l)), s.rate(l).ceil());
        }
        for l in s.big_l..=s.l_max() {
            prop_assert!(s.count(l) <= 1);
        }
        prop_assert_eq!(s.count(s.big_l), 1);
        let mut prev = u32::MAX;
        for l in 0..=s.l_max() {
            if l <= s.big_l {
                prop_assert!(s.count(l) <= prev);
                prev = s.count(l);
            }
        }
    }

    #[test]
    fn anchor_refreshes_once_per_period(steps in 1usize..200, half_tau in 1usize..20) {
        let tau = 2 * half_tau;
        let p = GaussianTarget::split(2, 3.0, 10).unwrap();
        let key = NoiseKey::new(steps as u64, Stream::Pair);
        let mut z = state(key, 2, 1.0);
        let mut anchor = AnchorState::new(tau);
        let mut ledger = WorkLedger::default();
        for j in 0..steps as i64 {
            let batch = draw_batch(key.step(j).slot(9), 10, 3);
            svrg_ubu_step(&p, &mut z, &mut anchor, 0.1, 1.0, &batch, &quad(key.step(j), 2), &mut ledger).unwrap();
        }
        prop_assert_eq!(ledger.anchor_refreshes as usize, steps.div_ceil(tau));
    }

    #[test]
    fn default_tau_is_even_and_covers_the_data(n_data in 1usize..100_000, n_b in 1usize..1_000) {
        let t = default_tau(n_data, n_b);
        prop_assert!(t >= 2 && t % 2 == 0);
        prop_assert!(t * n_b >= n_data);
        prop_assert!(t - 2 < n_data.div_ceil(n_b).max(2));
    }

    #[test]
    fn squares_follow_primaries(seed in 0u64..1_000, d in 1usize..6) {
        let fset = TestFunctionSet::coordinates_and_norm(d).with_squares();
        let x = draw_gaussians(NoiseKey::new(seed, Stream::Init), d);
        let vals = fset.evaluate(&x);
        for i in fset.primary_indices() {
            let sq = fset.square_index(i).unwrap();
            prop_assert!((vals[sq] - vals[i] * vals[i]).abs() <= 1e-12 * (1.0 + vals[sq]));
        }
    }
}
