//! Two-factor stochastic volatility model.
//!
//! ```text
//! u_0 ~ N(0, diag(τ²)),  τᵢ² = σᵢ² / (1 - γᵢ²)
//! u_t = α + A (u_{t-1} - α) + D_σ ε_u
//! y_t = β exp(u_t / 2) ⊙ ε_y
//! ```

use ndarray::{Array1, Array3};
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{normal, Trajectories};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SvSpec {
    pub alpha: Vec<f64>,
    pub gamma: Vec<f64>,
    pub sigma: Vec<f64>,
    pub beta: f64,
}

impl Default for SvSpec {
    fn default() -> Self {
        SvSpec {
            alpha: vec![0.0, 0.0],
            gamma: vec![0.97, 0.97],
            sigma: vec![0.3, 0.3],
            beta: 0.835,
        }
    }
}

impl SvSpec {
    pub fn dim(&self) -> usize {
        self.alpha.len()
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.dim();
        if d == 0 || self.gamma.len() != d || self.sigma.len() != d {
            return Err(Error::Config(
                "alpha, gamma and sigma must have equal nonzero length".into(),
            ));
        }
        if let Some(g) = self.gamma.iter().find(|g| !(g.abs() < 1.0)) {
            return Err(Error::Config(format!("|gamma| must be < 1, got {g}")));
        }
        Ok(())
    }

    /// Stationary variances `σᵢ² / (1 - γᵢ²)`.
    pub fn tau2(&self) -> Array1<f64> {
        self.gamma
            .iter()
            .zip(&self.sigma)
            .map(|(g, s)| s * s / (1.0 - g * g))
            .collect()
    }

    /// Transition mean `α + A (u - α)` for one coordinate.
    pub fn transition_mean(&self, i: usize, u: f64) -> f64 {
        self.alpha[i] + self.gamma[i] * (u - self.alpha[i])
    }

    /// Standard deviation of `y_i` given `u_i`.
    pub fn obs_std(&self, u: f64) -> f64 {
        self.beta * (0.5 * u).exp()
    }
}

pub fn simulate_sv(spec: &SvSpec, t: usize, n: usize, rng: &mut impl Rng) -> Result<Trajectories> {
    spec.validate()?;
    let d = spec.dim();
    let tau = spec.tau2().mapv(f64::sqrt);
    let mut states = Array3::zeros((n, t, d));
    let mut obs = Array3::zeros((n, t, d));
    for r in 0..n {
        let mut u: Vec<f64> = (0..d).map(|i| tau[i] * normal(rng)).collect();
        for k in 0..t {
            for i in 0..d {
                u[i] = spec.transition_mean(i, u[i]) + spec.sigma[i] * normal(rng);
                states[[r, k, i]] = u[i];
                obs[[r, k, i]] = spec.obs_std(u[i]) * normal(rng);
            }
        }
    }
    Ok(Trajectories { states, obs })
}
