//! Splitting maps for kinetic Langevin dynamics and the one-step kernels
//! built from them.
//!
//! All maps take pre-drawn standard normals so coupled chains can share noise
//! exactly. States are updated in place.

use crate::error::{Error, Result};
use crate::models::{GaussianApprox, Potential};
use crate::state::PhaseState;

/// Four standard-normal d-vectors driving one UBU or OHO step.
pub type Quad = [Vec<f64>; 4];

/// Two quadruples driving two fine steps of a coupled kernel.
pub type Octet = [Quad; 2];

pub fn zero_quad(d: usize) -> Quad {
    [vec![0.0; d], vec![0.0; d], vec![0.0; d], vec![0.0; d]]
}

/// Coefficients of the exact OU flow over duration `s`.
///
/// With `Z1 = √s ξ1` the Brownian increment and `Z2 = c1 ξ1 + c2 ξ2` the OU
/// integral `∫ e^{−γ(s−u)} dW_u`: `Var Z2 = (1−η²)/(2γ)`, `Cov(Z1, Z2) = F`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OUStepCoeffs {
    pub gamma: f64,
    pub s: f64,
    pub sqrt_s: f64,
    pub eta: f64,
    pub f: f64,
    pub c1: f64,
    pub c2: f64,
}

impl OUStepCoeffs {
    pub fn new(gamma: f64, s: f64) -> Self {
        let u = gamma * s;
        let one_minus_eta = -(-u).exp_m1();
        let f = one_minus_eta / gamma;
        let sqrt_s = s.sqrt();
        let c1 = if s > 0.0 { f / sqrt_s } else { 0.0 };
        // c2² = s·g(u) with g(u) = (1−e^{−2u})/(2u) − ((1−e^{−u})/u)².
        let g = if u < 1e-3 {
            u * u
                * (1.0 / 12.0
                    + u * (-1.0 / 12.0
                        + u * (17.0 / 360.0
                            + u * (-7.0 / 360.0 + u * (43.0 / 6720.0 - u * 107.0 / 60480.0)))))
        } else {
            -(-2.0 * u).exp_m1() / (2.0 * u) - (one_minus_eta / u).powi(2)
        };
        OUStepCoeffs {
            gamma,
            s,
            sqrt_s,
            eta: 1.0 - one_minus_eta,
            f,
            c1,
            c2: (s * g).max(0.0).sqrt(),
        }
    }

    /// `Var Z2 = (1 − η²)/(2γ)`.
    pub fn var_z2(&self) -> f64 {
        -(-2.0 * self.gamma * self.s).exp_m1() / (2.0 * self.gamma)
    }
}

fn check_step(h: f64) -> Result<()> {
    if h > 0.0 && h.is_finite() {
        Ok(())
    } else {
        Err(Error::InvalidInput(format!("stepsize must be positive, got {h}")))
    }
}

/// `v ← v − h g`, with `g` the gradient at `z.x`.
pub fn b_step(z: &mut PhaseState, h: f64, g: &[f64]) {
    for (v, gi) in z.v.iter_mut().zip(g) {
        *v -= h * gi;
    }
}

/// Exact OU flow: `x' = x + F v + √(2/γ)(Z1 − Z2)`, `v' = η v + √(2γ) Z2`.
pub fn u_step(z: &mut PhaseState, c: &OUStepCoeffs, xi1: &[f64], xi2: &[f64]) {
    let ax = (2.0 / c.gamma).sqrt();
    let av = (2.0 * c.gamma).sqrt();
    for k in 0..z.x.len() {
        let z1 = c.sqrt_s * xi1[k];
        let z2 = c.c1 * xi1[k] + c.c2 * xi2[k];
        z.x[k] += c.f * z.v[k] + ax * (z1 - z2);
        z.v[k] = c.eta * z.v[k] + av * z2;
    }
}

/// One UBU step whose B kick uses `grad(x̄, out)`; returns the gradient point `x̄`.
pub fn ubu_step_with<G>(z: &mut PhaseState, h: f64, gamma: f64, xi: &Quad, mut grad: G) -> Result<Vec<f64>>
where
    G: FnMut(&[f64], &mut [f64]) -> Result<()>,
{
    check_step(h)?;
    let c = OUStepCoeffs::new(gamma, 0.5 * h);
    u_step(z, &c, &xi[0], &xi[1]);
    let x_bar = z.x.clone();
    let mut g = vec![0.0; z.x.len()];
    grad(&x_bar, &mut g)?;
    b_step(z, h, &g);
    u_step(z, &c, &xi[2], &xi[3]);
    Ok(x_bar)
}

/// `U(h/2) B(h) U(h/2)` with the exact gradient.
pub fn ubu_step<P: Potential + ?Sized>(
    p: &P,
    z: &mut PhaseState,
    h: f64,
    gamma: f64,
    xi: &Quad,
) -> Result<Vec<f64>> {
    ubu_step_with(z, h, gamma, xi, |x, out| p.grad(x, out))
}

/// Velocity refresh: `v ← η v + √(2γ) Z2`, position unchanged.
pub fn o_step(z: &mut PhaseState, c: &OUStepCoeffs, xi1: &[f64], xi2: &[f64]) {
    let av = (2.0 * c.gamma).sqrt();
    for k in 0..z.v.len() {
        z.v[k] = c.eta * z.v[k] + av * (c.c1 * xi1[k] + c.c2 * xi2[k]);
    }
}

/// Two consecutive O steps of duration `s` each.
pub fn o2_step(z: &mut PhaseState, c: &OUStepCoeffs, xi: &Quad) {
    o_step(z, c, &xi[0], &xi[1]);
    o_step(z, c, &xi[2], &xi[3]);
}

/// Exact Hamiltonian flow for `½(x−x*)ᵀH*(x−x*)` over time `h`.
pub fn hstar_step(approx: &GaussianApprox, z: &mut PhaseState, h: f64) {
    let dx: Vec<f64> = z.x.iter().zip(approx.center()).map(|(a, c)| a - c).collect();
    let mut xt = approx.to_eigen(&dx);
    let mut vt = approx.to_eigen(&z.v);
    for ((x, v), &l) in xt.iter_mut().zip(vt.iter_mut()).zip(approx.eigenvalues()) {
        let w = l.sqrt();
        let (sn, cs) = (w * h).sin_cos();
        let (x0, v0) = (*x, *v);
        *x = cs * x0 + sn / w * v0;
        *v = -w * sn * x0 + cs * v0;
    }
    let nx = approx.from_eigen(&xt);
    let nv = approx.from_eigen(&vt);
    for (k, (a, c)) in nx.iter().zip(approx.center()).enumerate() {
        z.x[k] = a + c;
    }
    z.v.copy_from_slice(&nv);
}

/// `O(h/2) H*(h) O(h/2)`; leaves `μ_G` invariant.
pub fn oho_step(approx: &GaussianApprox, z: &mut PhaseState, h: f64, gamma: f64, xi: &Quad) -> Result<()> {
    check_step(h)?;
    let c = OUStepCoeffs::new(gamma, 0.5 * h);
    o_step(z, &c, &xi[0], &xi[1]);
    hstar_step(approx, z, h);
    o_step(z, &c, &xi[2], &xi[3]);
    Ok(())
}

/// Euler–Maruyama: `x' = x + h v`, `v' = v − h∇U(x) − hγ v + √(2γh) ξ`.
pub fn em_step<P: Potential + ?Sized>(p: &P, z: &mut PhaseState, h: f64, gamma: f64, xi: &[f64]) -> Result<()> {
    check_step(h)?;
    let g = p.grad_vec(&z.x)?;
    let a = (2.0 * gamma * h).sqrt();
    for k in 0..z.x.len() {
        let v = z.v[k];
        z.x[k] += h * v;
        z.v[k] = v - h * g[k] - h * gamma * v + a * xi[k];
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::couplings::m_transform;
    use crate::models::GaussianTarget;
    use crate::noise::{draw_gaussians, NoiseKey, Stream};

    struct Flat(usize);

    impl Potential for Flat {
        fn dim(&self) -> usize {
            self.0
        }
        fn value(&self, _: &[f64]) -> Result<f64> {
            Ok(0.0)
        }
        fn grad(&self, _: &[f64], out: &mut [f64]) -> Result<()> {
            out.iter_mut().for_each(|o| *o = 0.0);
            Ok(())
        }
        fn hessian(&self, _: &[f64]) -> Result<nalgebra::DMatrix<f64>> {
            Ok(nalgebra::DMatrix::zeros(self.0, self.0))
        }
        fn add_grad_component(&self, _: usize, _: &[f64], _: f64, _: &mut [f64]) -> Result<()> {
            Ok(())
        }
    }

    fn quad(key: NoiseKey, d: usize) -> Quad {
        std::array::from_fn(|i| draw_gaussians(key.slot(i as u32), d))
    }

    fn st(x: f64, v: f64) -> PhaseState {
        PhaseState::new(vec![x], vec![v]).unwrap()
    }

    #[test]
    fn coefficient_identities() {
        for &(gamma, s) in &[(2.0, 0.5), (1.0, 1e-6), (0.3, 1e-3), (5.0, 2.0), (1.0, 9.9e-4)] {
            let c = OUStepCoeffs::new(gamma, s);
            assert!((c.c1 - c.f / s.sqrt()).abs() < 1e-15);
            let var = -(-2.0 * gamma * s).exp_m1() / (2.0 * gamma);
            assert!((c.c1 * c.c1 + c.c2 * c.c2 - var).abs() <= 1e-13 * var);
            assert!(c.c2 > 0.0);
        }
    }

    #[test]
    fn series_branch_is_continuous() {
        let lo = OUStepCoeffs::new(1.0, 0.999_999e-3);
        let hi = OUStepCoeffs::new(1.0, 1.000_001e-3);
        assert!((lo.c2 - hi.c2).abs() / hi.c2 < 1e-5);
    }

    #[test]
    fn b_step_cases() {
        let mut z = st(0.5, 1.0);
        b_step(&mut z, 0.1, &[0.0]);
        assert_eq!(z, st(0.5, 1.0));
        b_step(&mut z, 0.1, &[2.0]);
        assert!((z.v[0] - 0.8).abs() < 1e-15);
        let orig = PhaseState::new(vec![0.3, 1.1], vec![-0.7, 2.5]).unwrap();
        let mut w = orig.clone();
        b_step(&mut w, 0.37, &[1.3, -0.9]);
        b_step(&mut w, -0.37, &[1.3, -0.9]);
        assert!(w.distance(&orig) < 1e-15);
    }

    #[test]
    fn u_step_closed_form() {
        let mut z = st(0.0, 1.0);
        let c = OUStepCoeffs::new(2.0, 0.5);
        u_step(&mut z, &c, &[0.0], &[0.0]);
        assert!((z.x[0] - (1.0 - (-1f64).exp()) / 2.0).abs() < 1e-15);
        assert!((z.v[0] - (-1f64).exp()).abs() < 1e-15);
        assert!((z.x[0] - 0.316060).abs() < 1e-6);
    }

    #[test]
    fn u_step_small_duration_is_identity() {
        let mut z = st(0.3, -1.0);
        let c = OUStepCoeffs::new(2.0, 1e-12);
        u_step(&mut z, &c, &[1.0], &[1.0]);
        assert!((z.x[0] - 0.3).abs() < 1e-5 && (z.v[0] + 1.0).abs() < 1e-5);
    }

    #[test]
    fn u_step_velocity_covariance() {
        let (gamma, s) = (2.0, 0.3);
        let c = OUStepCoeffs::new(gamma, s);
        let n = 1_000_000;
        let a = draw_gaussians(NoiseKey::new(1, Stream::Scratch).slot(0), n);
        let b = draw_gaussians(NoiseKey::new(1, Stream::Scratch).slot(1), n);
        let mut z = PhaseState::zeros(n);
        u_step(&mut z, &c, &a, &b);
        let var = z.v.iter().map(|v| v * v).sum::<f64>() / n as f64;
        let expect = 1.0 - (-2.0 * gamma * s).exp();
        assert!((var / expect - 1.0).abs() < 0.01, "{var} vs {expect}");
    }

    #[test]
    fn ubu_on_flat_potential_is_merged_u() {
        let gamma = 1.7;
        let h = 0.4;
        for i in 0..50 {
            let q = quad(NoiseKey::new(3, Stream::Scratch).step(i), 3);
            let z0 = PhaseState::new(vec![0.1, -2.0, 3.0], vec![1.0, 0.5, -0.2]).unwrap();
            let mut a = z0.clone();
            ubu_step(&Flat(3), &mut a, h, gamma, &q).unwrap();
            let (x1, x2) = m_transform(&q, gamma, h / 2.0).unwrap();
            let mut b = z0.clone();
            u_step(&mut b, &OUStepCoeffs::new(gamma, h), &x1, &x2);
            assert!(a.distance(&b) < 1e-12);
        }
    }

    #[test]
    fn rejects_zero_step() {
        let q = zero_quad(1);
        let mut z = st(0.0, 0.0);
        assert!(ubu_step(&Flat(1), &mut z, 0.0, 1.0, &q).is_err());
        assert!(oho_step(&GaussianApprox::diagonal(vec![0.0], vec![1.0]).unwrap(), &mut z, 0.0, 1.0, &q).is_err());
    }

    #[test]
    fn o_step_deterministic_part() {
        let mut z = st(0.4, 2.0);
        let c = OUStepCoeffs::new(1.0, 0.5);
        o_step(&mut z, &c, &[0.0], &[0.0]);
        assert_eq!(z.x[0], 0.4);
        assert!((z.v[0] - 2.0 * (-0.5f64).exp()).abs() < 1e-15);
    }

    #[test]
    fn o_step_preserves_standard_normal() {
        let n = 1_000_000;
        let key = NoiseKey::new(2, Stream::Scratch);
        let mut z = PhaseState::new(vec![0.0; n], draw_gaussians(key.slot(9), n)).unwrap();
        o_step(&mut z, &OUStepCoeffs::new(1.3, 0.7), &draw_gaussians(key.slot(0), n), &draw_gaussians(key.slot(1), n));
        let mean = z.v.iter().sum::<f64>() / n as f64;
        let var = z.v.iter().map(|v| v * v).sum::<f64>() / n as f64;
        assert!(mean.abs() < 0.01 && (var - 1.0).abs() < 0.01);
    }

    #[test]
    fn o2_equals_merged_o() {
        let (gamma, s) = (0.9, 0.25);
        for i in 0..100 {
            let q = quad(NoiseKey::new(4, Stream::Scratch).step(i), 2);
            let z0 = PhaseState::new(vec![1.0, 2.0], vec![-0.3, 0.8]).unwrap();
            let mut a = z0.clone();
            o2_step(&mut a, &OUStepCoeffs::new(gamma, s), &q);
            let (x1, x2) = m_transform(&q, gamma, s).unwrap();
            let mut b = z0.clone();
            o_step(&mut b, &OUStepCoeffs::new(gamma, 2.0 * s), &x1, &x2);
            assert!(a.distance(&b) < 1e-12);
        }
    }

    #[test]
    fn hstar_rotation() {
        let g = GaussianApprox::diagonal(vec![0.0], vec![1.0]).unwrap();
        let mut z = st(1.0, 0.0);
        hstar_step(&g, &mut z, 0.0);
        assert_eq!(z, st(1.0, 0.0));
        hstar_step(&g, &mut z, std::f64::consts::FRAC_PI_2);
        assert!(z.x[0].abs() < 1e-15 && (z.v[0] + 1.0).abs() < 1e-15);
    }

    #[test]
    fn hstar_conserves_mode_energy() {
        let h = nalgebra::DMatrix::from_row_slice(2, 2, &[3.0, 1.0, 1.0, 2.0]);
        let g = GaussianApprox::from_hessian(vec![0.5, -1.0], h.clone()).unwrap();
        let mut z = PhaseState::new(vec![1.0, 0.2], vec![0.3, -0.4]).unwrap();
        let energy = |z: &PhaseState| {
            let dx = [z.x[0] - 0.5, z.x[1] + 1.0];
            let hx = [h[(0, 0)] * dx[0] + h[(0, 1)] * dx[1], h[(1, 0)] * dx[0] + h[(1, 1)] * dx[1]];
            0.5 * (dx[0] * hx[0] + dx[1] * hx[1]) + 0.5 * (z.v[0].powi(2) + z.v[1].powi(2))
        };
        let e0 = energy(&z);
        for _ in 0..100 {
            hstar_step(&g, &mut z, 0.37);
        }
        assert!((energy(&z) - e0).abs() < 1e-12);
    }

    #[test]
    fn oho_noise_free_is_damped_flow() {
        let g = GaussianApprox::diagonal(vec![0.0], vec![1.0]).unwrap();
        let mut z = st(1.0, 0.0);
        oho_step(&g, &mut z, 0.01, 1.0, &zero_quad(1)).unwrap();
        let mut w = st(1.0, 0.0);
        hstar_step(&g, &mut w, 0.01);
        assert!((z.x[0] - w.x[0]).abs() < 1e-12);
        assert!((z.v[0] - (-0.005f64).exp() * w.v[0]).abs() < 1e-12);
    }

    #[test]
    fn oho_preserves_gaussian_approx() {
        let h = nalgebra::DMatrix::from_row_slice(2, 2, &[2.0, 0.5, 0.5, 1.0]);
        let g = GaussianApprox::from_hessian(vec![1.0, -1.0], h.clone()).unwrap();
        let cov = h.try_inverse().unwrap();
        let key = NoiseKey::new(12, Stream::Scratch);
        let mut z = PhaseState::new(g.sample_position(key.slot(100)), draw_gaussians(key.slot(101), 2)).unwrap();
        let n = 1_000_000;
        let mut sx = [0.0; 2];
        let mut sxx = [0.0; 2];
        let mut svv = [0.0; 2];
        for i in 0..n {
            oho_step(&g, &mut z, 0.7, 1.0, &quad(key.step(i), 2)).unwrap();
            for k in 0..2 {
                sx[k] += z.x[k];
                sxx[k] += (z.x[k] - g.center()[k]).powi(2);
                svv[k] += z.v[k] * z.v[k];
            }
        }
        for k in 0..2 {
            let nf = n as f64;
            assert!((sx[k] / nf - g.center()[k]).abs() < 0.01 * cov[(k, k)].sqrt() * 3.0);
            assert!((sxx[k] / nf / cov[(k, k)] - 1.0).abs() < 0.01 * 3.0);
            assert!((svv[k] / nf - 1.0).abs() < 0.01 * 3.0);
        }
    }

    #[test]
    fn oho_autocorrelation_decays() {
        let g = GaussianApprox::diagonal(vec![0.0], vec![1.0]).unwrap();
        let key = NoiseKey::new(13, Stream::Scratch);
        let mut z = st(0.0, 1.0);
        let xs: Vec<f64> = (0..200_000)
            .map(|i| {
                oho_step(&g, &mut z, 0.5, 1.0, &quad(key.step(i), 1)).unwrap();
                z.x[0]
            })
            .collect();
        let n = xs.len();
        let acf = |lag: usize| xs[..n - lag].iter().zip(&xs[lag..]).map(|(a, b)| a * b).sum::<f64>() / (n - lag) as f64;
        let (c0, c10) = (acf(0), acf(10).abs());
        let rate = -(c10 / c0).ln() / 10.0;
        assert!(rate > 0.0);
    }

    #[test]
    fn em_deterministic() {
        let mut z = st(1.0, 2.0);
        em_step(&Flat(1), &mut z, 0.1, 3.0, &[0.0]).unwrap();
        assert!((z.x[0] - 1.2).abs() < 1e-15);
        assert!((z.v[0] - 2.0 * 0.7).abs() < 1e-15);
    }

    #[test]
    fn em_exact_gradient_uses_start_point() {
        let g = GaussianTarget::new(1, 1.0).unwrap();
        let mut z = st(1.0, 0.0);
        em_step(&g, &mut z, 0.5, 1.0, &[0.0]).unwrap();
        assert_eq!(z.x[0], 1.0);
        assert_eq!(z.v[0], -0.5);
    }
}
