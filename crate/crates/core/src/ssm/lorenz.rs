//! Stochastic Lorenz-96, single-scale or coupled to `J` fast variables per
//! slow variable, integrated with Euler–Maruyama and observed through
//! `y = u³ + ε`.

use ndarray::Array3;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{normal, Trajectories, BLOW_UP};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LorenzInit {
    /// `u_{0,i} = sin(2πi/K)` for `i = 1..K`.
    Sine,
    /// `u_{0,i} = F + σ_u ε`, `v_{0,j} = σ_v ε`.
    Forcing,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LorenzSpec {
    pub k: usize,
    pub j: usize,
    pub f: f64,
    pub h: f64,
    pub b: f64,
    pub c: f64,
    pub sigma_u: f64,
    pub sigma_v: f64,
    pub dt_obs: f64,
    pub dt_int: f64,
    pub two_scale: bool,
    pub init: LorenzInit,
    /// Observation noise standard deviation.
    pub obs_std: f64,
}

impl LorenzSpec {
    pub fn single_scale(k: usize) -> Self {
        LorenzSpec {
            k,
            j: 32,
            f: 8.0,
            h: 1.0,
            b: 10.0,
            c: 0.0,
            sigma_u: 1.0,
            sigma_v: 0.0,
            dt_obs: 0.05,
            dt_int: 0.005,
            two_scale: false,
            init: LorenzInit::Sine,
            obs_std: 1.0,
        }
    }

    pub fn two_scale(k: usize, f: f64) -> Self {
        LorenzSpec {
            k,
            j: 32,
            f,
            h: 1.0,
            b: 10.0,
            c: 4.0,
            sigma_u: 0.1,
            sigma_v: 0.01,
            dt_obs: 0.05,
            dt_int: 0.005,
            two_scale: true,
            init: LorenzInit::Forcing,
            obs_std: 1.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.k < 4 {
            return Err(Error::Config("Lorenz-96 needs K >= 4".into()));
        }
        if self.two_scale && self.j == 0 {
            return Err(Error::Config("two-scale Lorenz needs J >= 1".into()));
        }
        self.substeps()?;
        Ok(())
    }

    pub fn substeps(&self) -> Result<usize> {
        let m = (self.dt_obs / self.dt_int).round();
        if !(m >= 1.0) || (m * self.dt_int - self.dt_obs).abs() > 1e-9 * self.dt_obs {
            return Err(Error::Config(format!(
                "dt_int = {} does not divide dt_obs = {}",
                self.dt_int, self.dt_obs
            )));
        }
        Ok(m as usize)
    }

    /// Observed slow indices (0-based): all, or every other one starting at 0.
    pub fn observed(&self) -> Vec<usize> {
        if self.two_scale {
            (0..self.k).step_by(2).collect()
        } else {
            (0..self.k).collect()
        }
    }

    fn fast_len(&self) -> usize {
        if self.two_scale {
            self.k * self.j
        } else {
            0
        }
    }
}

/// Slow and fast drifts at `(u, v)`.
pub fn drift(spec: &LorenzSpec, u: &[f64], v: &[f64], du: &mut [f64], dv: &mut [f64]) {
    let k = u.len();
    let coupling = spec.h * spec.c / spec.b;
    for i in 0..k {
        let im1 = u[(i + k - 1) % k];
        let im2 = u[(i + k - 2) % k];
        let ip1 = u[(i + 1) % k];
        du[i] = -im1 * (im2 - ip1) - u[i] + spec.f;
    }
    let n = v.len();
    if n == 0 {
        return;
    }
    let jj = spec.j;
    for i in 0..k {
        let s: f64 = v[i * jj..(i + 1) * jj].iter().sum();
        du[i] -= coupling * s;
    }
    for j in 0..n {
        let jp1 = v[(j + 1) % n];
        let jp2 = v[(j + 2) % n];
        let jm1 = v[(j + n - 1) % n];
        dv[j] = -spec.c * spec.b * jp1 * (jp2 - jm1) - spec.c * v[j] + coupling * u[j / jj];
    }
}

/// Advances `(u, v)` by `steps` Euler–Maruyama steps of size `dt`.
/// `noise` draws standard normals; `None` integrates the deterministic ODE.
pub fn euler_maruyama(
    spec: &LorenzSpec,
    u: &mut [f64],
    v: &mut [f64],
    dt: f64,
    steps: usize,
    mut noise: Option<&mut dyn FnMut() -> f64>,
) {
    let mut du = vec![0.0; u.len()];
    let mut dv = vec![0.0; v.len()];
    let su = spec.sigma_u * dt.sqrt();
    let sv = spec.sigma_v * dt.sqrt();
    for _ in 0..steps {
        drift(spec, u, v, &mut du, &mut dv);
        for (x, d) in u.iter_mut().zip(&du) {
            *x += dt * d;
        }
        for (x, d) in v.iter_mut().zip(&dv) {
            *x += dt * d;
        }
        if let Some(draw) = noise.as_mut() {
            for x in u.iter_mut() {
                *x += su * draw();
            }
            for x in v.iter_mut() {
                *x += sv * draw();
            }
        }
    }
}

pub fn initial_state(spec: &LorenzSpec, rng: &mut impl Rng) -> (Vec<f64>, Vec<f64>) {
    let k = spec.k;
    match spec.init {
        LorenzInit::Sine => {
            let u = (1..=k)
                .map(|i| (2.0 * std::f64::consts::PI * i as f64 / k as f64).sin())
                .collect();
            (u, vec![0.0; spec.fast_len()])
        }
        LorenzInit::Forcing => {
            let u = (0..k).map(|_| spec.f + spec.sigma_u * normal(rng)).collect();
            let v = (0..spec.fast_len()).map(|_| spec.sigma_v * normal(rng)).collect();
            (u, v)
        }
    }
}

pub fn simulate_lorenz(spec: &LorenzSpec, t: usize, n: usize, rng: &mut impl Rng) -> Result<Trajectories> {
    spec.validate()?;
    let steps = spec.substeps()?;
    let obs_idx = spec.observed();
    let mut states = Array3::zeros((n, t, spec.k));
    let mut obs = Array3::zeros((n, t, obs_idx.len()));
    let stochastic = spec.sigma_u > 0.0 || spec.sigma_v > 0.0;
    for r in 0..n {
        let (mut u, mut v) = initial_state(spec, rng);
        for step in 0..t {
            {
                let mut draw = || normal(rng);
                let noise: Option<&mut dyn FnMut() -> f64> = if stochastic { Some(&mut draw) } else { None };
                euler_maruyama(spec, &mut u, &mut v, spec.dt_int, steps, noise);
            }
            let peak = u.iter().chain(&v).fold(0.0f64, |m, x| m.max(x.abs()));
            if !(peak <= BLOW_UP) {
                return Err(Error::Unstable(format!(
                    "Lorenz trajectory {r} reached |x| = {peak:e} at step {} (dt_int = {})",
                    step + 1,
                    spec.dt_int
                )));
            }
            for i in 0..spec.k {
                states[[r, step, i]] = u[i];
            }
            for (o, &i) in obs_idx.iter().enumerate() {
                obs[[r, step, o]] = u[i].powi(3) + spec.obs_std * normal(rng);
            }
        }
    }
    Ok(Trajectories { states, obs })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn zero_forcing_fixed_point() {
        let spec = LorenzSpec {
            f: 0.0,
            sigma_u: 0.0,
            ..LorenzSpec::single_scale(6)
        };
        let mut u = vec![0.0; 6];
        euler_maruyama(&spec, &mut u, &mut [], 0.005, 100, None);
        assert!(u.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn shapes_and_observed_indices() {
        let spec = LorenzSpec::two_scale(8, 8.0);
        assert_eq!(spec.observed(), vec![0, 2, 4, 6]);
        let tr = simulate_lorenz(&spec, 5, 2, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert_eq!(tr.states.shape(), &[2, 5, 8]);
        assert_eq!(tr.obs.shape(), &[2, 5, 4]);
        let tr = simulate_lorenz(&LorenzSpec::single_scale(5), 3, 1, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert_eq!(tr.obs.shape(), &[1, 3, 5]);
    }

    #[test]
    fn rejects_non_dividing_step() {
        let spec = LorenzSpec {
            dt_int: 0.003,
            ..LorenzSpec::single_scale(5)
        };
        assert!(spec.validate().is_err());
    }
}
