use nalgebra::DMatrix;

use super::{check_component, check_dim, sigmoid, softplus, Potential};
use crate::error::{Error, Result};

pub const DEFAULT_RW_VARIANCE: f64 = 0.01;
pub const DEFAULT_MARGINAL_VARIANCE: f64 = 10.0;

/// One match: rounds and teams are 0-based indices.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Game {
    pub round: usize,
    pub home: usize,
    pub away: usize,
    pub home_goals: i64,
    pub away_goals: i64,
}

/// Poisson match-score model with softplus rates and random-walk priors on
/// time-varying attack and defence strengths.
///
/// Layout: `a[t, w]` at `t·W + w`, then `d[t, w]` at `T·W + t·W + w`.
#[derive(Debug, Clone)]
pub struct PoissonSoccer {
    teams: usize,
    rounds: usize,
    games: Vec<Game>,
    sigma_sq: f64,
    sigma0_sq: f64,
}

impl PoissonSoccer {
    pub fn new(
        teams: usize,
        rounds: usize,
        games: Vec<Game>,
        sigma_sq: f64,
        sigma0_sq: f64,
    ) -> Result<Self> {
        if teams == 0 || rounds == 0 {
            return Err(Error::InvalidInput("poisson model needs teams and rounds".into()));
        }
        if !(sigma_sq > 0.0 && sigma0_sq > 0.0) {
            return Err(Error::InvalidInput("prior variances must be positive".into()));
        }
        for (g, game) in games.iter().enumerate() {
            if game.home >= teams || game.away >= teams {
                return Err(Error::InvalidInput(format!("game {g}: team index out of range")));
            }
            if game.round >= rounds {
                return Err(Error::InvalidInput(format!("game {g}: round index out of range")));
            }
            if game.home == game.away {
                return Err(Error::InvalidInput(format!("game {g}: team plays itself")));
            }
            if game.home_goals < 0 || game.away_goals < 0 {
                return Err(Error::InvalidInput(format!("game {g}: negative goal count")));
            }
        }
        Ok(PoissonSoccer {
            teams,
            rounds,
            games,
            sigma_sq,
            sigma0_sq,
        })
    }

    pub fn teams(&self) -> usize {
        self.teams
    }

    pub fn rounds(&self) -> usize {
        self.rounds
    }

    pub fn games(&self) -> &[Game] {
        &self.games
    }

    pub fn attack_index(&self, team: usize, round: usize) -> usize {
        team * self.rounds + round
    }

    pub fn defence_index(&self, team: usize, round: usize) -> usize {
        (self.teams + team) * self.rounds + round
    }

    /// Parameter pairs driving the home and away linear predictors.
    fn predictors(&self, g: &Game) -> [(usize, usize, i64); 2] {
        [
            (self.attack_index(g.home, g.round), self.defence_index(g.away, g.round), g.home_goals),
            (self.attack_index(g.away, g.round), self.defence_index(g.home, g.round), g.away_goals),
        ]
    }

    fn prior_value(&self, theta: &[f64]) -> f64 {
        let mut u = 0.0;
        for chain in theta.chunks(self.rounds) {
            for (w, &a) in chain.iter().enumerate() {
                u += a * a / (2.0 * self.sigma0_sq);
                if w + 1 < chain.len() {
                    u += (chain[w + 1] - a).powi(2) / (2.0 * self.sigma_sq);
                }
            }
        }
        u
    }

    fn add_prior_grad(&self, theta: &[f64], scale: f64, out: &mut [f64]) {
        for (chain, o) in theta.chunks(self.rounds).zip(out.chunks_mut(self.rounds)) {
            for w in 0..chain.len() {
                let mut g = chain[w] / self.sigma0_sq;
                if w + 1 < chain.len() {
                    g -= (chain[w + 1] - chain[w]) / self.sigma_sq;
                }
                if w > 0 {
                    g += (chain[w] - chain[w - 1]) / self.sigma_sq;
                }
                o[w] += scale * g;
            }
        }
    }

    fn add_game_grad(&self, g: &Game, theta: &[f64], scale: f64, out: &mut [f64]) {
        for (ia, id, s) in self.predictors(g) {
            let eta = theta[ia] + theta[id];
            let dd = scale * sigmoid(eta) * (1.0 - s as f64 / softplus(eta));
            out[ia] += dd;
            out[id] += dd;
        }
    }
}

fn ln_softplus(eta: f64) -> f64 {
    if eta < -30.0 {
        eta - 0.5 * eta.exp()
    } else {
        softplus(eta).ln()
    }
}

impl Potential for PoissonSoccer {
    fn dim(&self) -> usize {
        2 * self.teams * self.rounds
    }

    fn n_data(&self) -> usize {
        self.games.len()
    }

    fn value(&self, theta: &[f64]) -> Result<f64> {
        check_dim(self.dim(), theta.len())?;
        let mut u = self.prior_value(theta);
        for g in &self.games {
            for (ia, id, s) in self.predictors(g) {
                let eta = theta[ia] + theta[id];
                u += softplus(eta) - s as f64 * ln_softplus(eta);
            }
        }
        Ok(u)
    }

    fn grad(&self, theta: &[f64], out: &mut [f64]) -> Result<()> {
        check_dim(self.dim(), theta.len())?;
        out.iter_mut().for_each(|o| *o = 0.0);
        self.add_prior_grad(theta, 1.0, out);
        for g in &self.games {
            self.add_game_grad(g, theta, 1.0, out);
        }
        Ok(())
    }

    fn hessian(&self, theta: &[f64]) -> Result<DMatrix<f64>> {
        check_dim(self.dim(), theta.len())?;
        let d = self.dim();
        let mut h = DMatrix::zeros(d, d);
        for c in 0..2 * self.teams {
            for w in 0..self.rounds {
                let i = c * self.rounds + w;
                h[(i, i)] += 1.0 / self.sigma0_sq;
                if w + 1 < self.rounds {
                    let r = 1.0 / self.sigma_sq;
                    h[(i, i)] += r;
                    h[(i + 1, i + 1)] += r;
                    h[(i, i + 1)] -= r;
                    h[(i + 1, i)] -= r;
                }
            }
        }
        for g in &self.games {
            for (ia, id, s) in self.predictors(g) {
                let eta = theta[ia] + theta[id];
                let sg = sigmoid(eta);
                let lam = softplus(eta);
                let s = s as f64;
                let c = s * sg * sg / (lam * lam) + (1.0 - s / lam) * sg * (1.0 - sg);
                for &p in &[ia, id] {
                    for &q in &[ia, id] {
                        h[(p, q)] += c;
                    }
                }
            }
        }
        Ok(h)
    }

    fn add_grad_component(&self, i: usize, theta: &[f64], scale: f64, out: &mut [f64]) -> Result<()> {
        check_component(i, self.n_data())?;
        if i == 0 {
            self.add_prior_grad(theta, scale, out);
        } else {
            self.add_game_grad(&self.games[i - 1], theta, scale, out);
        }
        Ok(())
    }
}
