//! Stochastic viscous Burgers equation on `[-1, 1]` with homogeneous
//! Dirichlet boundaries and initial condition `-sin(πx)`.
//!
//! Each fine step applies explicit upwind advection, additive noise
//! `σ √δt ξ` on interior nodes, then implicit diffusion.

use ndarray::{Array1, Array3};
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{normal, Trajectories, BLOW_UP};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BurgersSpec {
    pub nu: f64,
    pub sigma: f64,
    /// Grid points including both boundary nodes.
    pub points: usize,
    pub dt_obs: f64,
    /// Fine steps per observation interval.
    pub substeps: usize,
    /// Observation noise standard deviation.
    pub r: f64,
}

impl Default for BurgersSpec {
    fn default() -> Self {
        BurgersSpec {
            nu: 0.05,
            sigma: 1.0,
            points: 50,
            dt_obs: 0.005,
            substeps: 1,
            r: 0.5,
        }
    }
}

impl BurgersSpec {
    pub fn validate(&self) -> Result<()> {
        if self.points < 3 || self.substeps == 0 || !(self.dt_obs > 0.0) || self.nu < 0.0 || self.sigma < 0.0 {
            return Err(Error::Config(
                "Burgers needs points >= 3, substeps >= 1, dt_obs > 0, nu >= 0, sigma >= 0".into(),
            ));
        }
        Ok(())
    }

    pub fn dx(&self) -> f64 {
        2.0 / (self.points - 1) as f64
    }

    pub fn grid(&self) -> Array1<f64> {
        Array1::from_shape_fn(self.points, |i| -1.0 + i as f64 * self.dx())
    }

    /// Observed nodes: every other node starting at the first.
    pub fn observed(&self) -> Vec<usize> {
        (0..self.points).step_by(2).collect()
    }

    pub fn initial(&self) -> Array1<f64> {
        let mut u = self.grid().mapv(|x| -(std::f64::consts::PI * x).sin());
        let p = self.points;
        u[0] = 0.0;
        u[p - 1] = 0.0;
        u
    }
}

/// Solves `(1 + 2λ) x_i - λ (x_{i-1} + x_{i+1}) = b_i` on interior nodes with
/// zero boundary values, in place.
fn implicit_diffusion(u: &mut Array1<f64>, lambda: f64, scratch: &mut Vec<f64>) {
    let p = u.len();
    let m = p - 2;
    if m == 0 || lambda == 0.0 {
        return;
    }
    let diag = 1.0 + 2.0 * lambda;
    let off = -lambda;
    scratch.clear();
    scratch.resize(m, 0.0);
    // forward sweep, c' in scratch, d' in u
    scratch[0] = off / diag;
    u[1] /= diag;
    for i in 1..m {
        let denom = diag - off * scratch[i - 1];
        scratch[i] = off / denom;
        u[i + 1] = (u[i + 1] - off * u[i]) / denom;
    }
    for i in (0..m - 1).rev() {
        u[i + 1] -= scratch[i] * u[i + 2];
    }
}

/// One fine step. Pass `None` for the deterministic equation.
pub fn burgers_step(
    spec: &BurgersSpec,
    u: &mut Array1<f64>,
    dt: f64,
    rng: Option<&mut dyn FnMut() -> f64>,
    scratch: &mut Vec<f64>,
) {
    let p = u.len();
    let dx = 2.0 / (p - 1) as f64;
    let old = u.clone();
    for i in 1..p - 1 {
        let v = old[i];
        let grad = if v > 0.0 {
            (old[i] - old[i - 1]) / dx
        } else {
            (old[i + 1] - old[i]) / dx
        };
        u[i] = v - dt * v * grad;
    }
    if let Some(draw) = rng {
        let amp = spec.sigma * dt.sqrt();
        for i in 1..p - 1 {
            u[i] += amp * draw();
        }
    }
    implicit_diffusion(u, spec.nu * dt / (dx * dx), scratch);
}

/// Deterministic solution after `steps` fine steps of size `dt`.
pub fn integrate_deterministic(spec: &BurgersSpec, u0: &Array1<f64>, dt: f64, steps: usize) -> Array1<f64> {
    let mut u = u0.clone();
    let mut scratch = Vec::new();
    for _ in 0..steps {
        burgers_step(spec, &mut u, dt, None, &mut scratch);
    }
    u
}

pub fn simulate_burgers(spec: &BurgersSpec, t: usize, n: usize, rng: &mut impl Rng) -> Result<Trajectories> {
    spec.validate()?;
    let p = spec.points;
    let obs_idx = spec.observed();
    let dt = spec.dt_obs / spec.substeps as f64;
    let mut states = Array3::zeros((n, t, p));
    let mut obs = Array3::zeros((n, t, obs_idx.len()));
    let mut scratch = Vec::new();
    for r in 0..n {
        let mut u = spec.initial();
        for k in 0..t {
            for _ in 0..spec.substeps {
                let mut draw = || normal(rng);
                let noise: Option<&mut dyn FnMut() -> f64> = if spec.sigma > 0.0 { Some(&mut draw) } else { None };
                burgers_step(spec, &mut u, dt, noise, &mut scratch);
            }
            let peak = u.iter().fold(0.0f64, |m, v| m.max(v.abs()));
            if !(peak <= BLOW_UP) {
                return Err(Error::Unstable(format!(
                    "Burgers trajectory {r} reached |u| = {peak:e} at step {} (dt = {dt}, dx = {})",
                    k + 1,
                    spec.dx()
                )));
            }
            states.slice_mut(ndarray::s![r, k, ..]).assign(&u);
            for (j, &i) in obs_idx.iter().enumerate() {
                obs[[r, k, j]] = u[i] + spec.r * normal(rng);
            }
        }
    }
    Ok(Trajectories { states, obs })
}
