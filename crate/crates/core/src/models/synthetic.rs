//! Desk-scale synthetic datasets drawn from the models' own priors.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Distribution, Poisson, StandardNormal};

use super::{softplus, Game, MultinomialRegression, PoissonSoccer};
use crate::error::{Error, Result};
use crate::noise::{NoiseKey, Stream};

pub struct SyntheticMultinomial {
    pub model: MultinomialRegression,
    /// Parameters the labels were simulated from.
    pub truth: Vec<f64>,
}

pub struct SyntheticSoccer {
    pub model: PoissonSoccer,
    pub truth: Vec<f64>,
}

/// Draw a class index from the softmax of `⟨x, q^k⟩`.
pub fn sample_label<R: Rng>(q: &[f64], x: &[f64], classes: usize, rng: &mut R) -> usize {
    let d0 = x.len();
    let scores: Vec<f64> = (0..classes)
        .map(|k| q[k * d0..(k + 1) * d0].iter().zip(x).map(|(a, b)| a * b).sum())
        .collect();
    let mx = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let w: Vec<f64> = scores.iter().map(|s| (s - mx).exp()).collect();
    let total: f64 = w.iter().sum();
    let mut u = rng.random::<f64>() * total;
    for (k, wk) in w.iter().enumerate() {
        if u < *wk {
            return k;
        }
        u -= wk;
    }
    classes - 1
}

/// `d0` counts the trailing intercept, so each datum has `d0 − 1` uniform features.
pub fn synthetic_multinomial(
    classes: usize,
    d0: usize,
    n_data: usize,
    sigma0_sq: f64,
    seed: u64,
) -> Result<SyntheticMultinomial> {
    if d0 < 1 || n_data < 1 || classes < 2 {
        return Err(Error::InvalidInput("synthetic multinomial sizes must be positive".into()));
    }
    let mut rng = NoiseKey::new(seed, Stream::Data).rng();
    let sd = sigma0_sq.sqrt();
    let truth: Vec<f64> = (0..classes * d0)
        .map(|_| sd * rng.sample::<f64, _>(StandardNormal))
        .collect();
    let mut features = Vec::with_capacity(n_data);
    let mut labels = Vec::with_capacity(n_data);
    for _ in 0..n_data {
        let f: Vec<f64> = (0..d0 - 1).map(|_| rng.random::<f64>()).collect();
        let mut x = f.clone();
        x.push(1.0);
        labels.push(sample_label(&truth, &x, classes, &mut rng));
        features.push(f);
    }
    let model = MultinomialRegression::new(&features, labels, classes, sigma0_sq)?;
    Ok(SyntheticMultinomial { model, truth })
}

/// Round-robin: every pair of teams meets once per round, with the home side
/// alternating between rounds.
pub fn synthetic_soccer(
    teams: usize,
    rounds: usize,
    sigma_sq: f64,
    sigma0_sq: f64,
    seed: u64,
) -> Result<SyntheticSoccer> {
    if teams < 2 || rounds < 1 {
        return Err(Error::InvalidInput("synthetic soccer needs >= 2 teams and >= 1 round".into()));
    }
    let mut rng = NoiseKey::new(seed, Stream::Data).rng();
    let mut prec = DMatrix::<f64>::identity(rounds, rounds) / sigma0_sq;
    for w in 0..rounds.saturating_sub(1) {
        let r = 1.0 / sigma_sq;
        prec[(w, w)] += r;
        prec[(w + 1, w + 1)] += r;
        prec[(w, w + 1)] -= r;
        prec[(w + 1, w)] -= r;
    }
    let chol = prec
        .cholesky()
        .ok_or_else(|| Error::Model("random-walk prior precision not positive definite".into()))?;
    let upper = chol.l().transpose();
    let mut truth = Vec::with_capacity(2 * teams * rounds);
    for _ in 0..2 * teams {
        let xi = DVector::from_iterator(rounds, (0..rounds).map(|_| rng.sample::<f64, _>(StandardNormal)));
        let z = upper
            .solve_upper_triangular(&xi)
            .ok_or_else(|| Error::Model("triangular solve failed".into()))?;
        truth.extend(z.iter());
    }
    let mut games = Vec::with_capacity(teams * (teams - 1) / 2 * rounds);
    for round in 0..rounds {
        for i in 0..teams {
            for j in i + 1..teams {
                let (home, away) = if (round + i + j) % 2 == 0 { (i, j) } else { (j, i) };
                let ah = truth[home * rounds + round];
                let da = truth[(teams + away) * rounds + round];
                let aa = truth[away * rounds + round];
                let dh = truth[(teams + home) * rounds + round];
                let mut goals = |eta: f64| -> i64 {
                    Poisson::new(softplus(eta)).map(|p| p.sample(&mut rng) as i64).unwrap_or(0)
                };
                let home_goals = goals(ah + da);
                let away_goals = goals(aa + dh);
                games.push(Game {
                    round,
                    home,
                    away,
                    home_goals,
                    away_goals,
                });
            }
        }
    }
    let model = PoissonSoccer::new(teams, rounds, games, sigma_sq, sigma0_sq)?;
    Ok(SyntheticSoccer { model, truth })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::Potential;
    use statrs::distribution::{ChiSquared, ContinuousCDF};

    #[test]
    fn multinomial_is_reproducible() {
        let a = synthetic_multinomial(3, 5, 200, 0.1, 11).unwrap();
        let b = synthetic_multinomial(3, 5, 200, 0.1, 11).unwrap();
        assert_eq!(a.truth, b.truth);
        assert_eq!(a.model.labels(), b.model.labels());
        assert_eq!(a.model.dim(), 15);
        assert_eq!(a.model.n_data(), 200);
    }

    #[test]
    fn round_robin_count() {
        let s = synthetic_soccer(4, 6, 0.01, 10.0, 2).unwrap();
        assert_eq!(s.model.games().len(), 36);
        assert_eq!(s.model.n_data(), 36);
        assert_eq!(s.model.dim(), 2 * 4 * 6);
    }

    #[test]
    fn labels_follow_likelihood() {
        let classes = 4;
        let q = [0.3, -0.2, 0.0, 0.5, 0.9, -0.4, -0.6, 0.1];
        let x = [0.7, 1.0];
        let mut rng = NoiseKey::new(8, Stream::Scratch).rng();
        let n = 10_000;
        let mut counts = vec![0usize; classes];
        for _ in 0..n {
            counts[sample_label(&q, &x, classes, &mut rng)] += 1;
        }
        let s: Vec<f64> = (0..classes).map(|k| q[2 * k] * x[0] + q[2 * k + 1] * x[1]).collect();
        let z: f64 = s.iter().map(|v| v.exp()).sum();
        let chi2: f64 = (0..classes)
            .map(|k| {
                let e = n as f64 * s[k].exp() / z;
                (counts[k] as f64 - e).powi(2) / e
            })
            .sum();
        let crit = ChiSquared::new((classes - 1) as f64).unwrap().inverse_cdf(0.99);
        assert!(chi2 < crit, "chi2 {chi2} >= {crit}");
    }
}
