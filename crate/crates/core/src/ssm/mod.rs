//! Benchmark state-space models and trajectory datasets.

pub mod advdiff;
pub mod burgers;
pub mod dataset;
pub mod lorenz;
pub mod sv;

use nalgebra::DVector;
use ndarray::{s, Array1, Array2, Array3, ArrayView2, Axis};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::gaussian::{psd_factor, LinearSsm};

pub use advdiff::{build_advdiff, AdvDiffSpec};
pub use burgers::{simulate_burgers, BurgersSpec};
pub use dataset::{make_dataset, Dataset};
pub use lorenz::{simulate_lorenz, LorenzSpec};
pub use sv::{simulate_sv, SvSpec};

/// Magnitude beyond which a nonlinear simulation is declared blown up.
pub const BLOW_UP: f64 = 1e3;

pub(crate) fn normal(rng: &mut impl Rng) -> f64 {
    StandardNormal.sample(rng)
}

/// `N` paired state and observation paths `u_{1:T}`, `y_{1:T}`, stored as
/// `(N, T, d)` arrays.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectories {
    pub states: Array3<f64>,
    pub obs: Array3<f64>,
}

impl Trajectories {
    pub fn new(states: Array3<f64>, obs: Array3<f64>) -> Result<Self> {
        if states.dim().0 != obs.dim().0 || states.dim().1 != obs.dim().1 {
            return Err(shape_err(
                "Trajectories::new",
                format!("{:?}", &states.shape()[..2]),
                format!("{:?}", &obs.shape()[..2]),
            ));
        }
        Ok(Trajectories { states, obs })
    }

    pub fn count(&self) -> usize {
        self.states.dim().0
    }

    pub fn horizon(&self) -> usize {
        self.states.dim().1
    }

    pub fn state_dim(&self) -> usize {
        self.states.dim().2
    }

    pub fn obs_dim(&self) -> usize {
        self.obs.dim().2
    }

    pub fn states_of(&self, i: usize) -> ArrayView2<'_, f64> {
        self.states.index_axis(Axis(0), i)
    }

    pub fn obs_of(&self, i: usize) -> ArrayView2<'_, f64> {
        self.obs.index_axis(Axis(0), i)
    }

    pub fn select(&self, idx: &[usize]) -> Trajectories {
        Trajectories {
            states: self.states.select(Axis(0), idx),
            obs: self.obs.select(Axis(0), idx),
        }
    }

    /// First `t` steps of every path.
    pub fn truncate(&self, t: usize) -> Trajectories {
        let t = t.min(self.horizon());
        Trajectories {
            states: self.states.slice(s![.., ..t, ..]).to_owned(),
            obs: self.obs.slice(s![.., ..t, ..]).to_owned(),
        }
    }

    /// Rounds every value through `f32`.
    pub fn quantize_f32(&mut self) {
        self.states.mapv_inplace(|x| x as f32 as f64);
        self.obs.mapv_inplace(|x| x as f32 as f64);
    }
}

/// Per-coordinate affine standardization of states and observations.
#[derive(Debug, Clone, PartialEq)]
pub struct Standardization {
    pub u_mean: Array1<f64>,
    pub u_std: Array1<f64>,
    pub y_mean: Array1<f64>,
    pub y_std: Array1<f64>,
}

fn mean_std(a: &Array3<f64>) -> (Array1<f64>, Array1<f64>) {
    let d = a.dim().2;
    let flat = a.to_shape((a.len() / d.max(1), d)).expect("contiguous").to_owned();
    let mean = flat.mean_axis(Axis(0)).unwrap_or_else(|| Array1::zeros(d));
    let std = flat.std_axis(Axis(0), 0.0).mapv(|s| if s > 1e-12 { s } else { 1.0 });
    (mean, std)
}

impl Standardization {
    pub fn fit(tr: &Trajectories) -> Result<Self> {
        if tr.count() == 0 || tr.horizon() == 0 {
            return Err(Error::Empty("standardization needs at least one step".into()));
        }
        let (u_mean, u_std) = mean_std(&tr.states);
        let (y_mean, y_std) = mean_std(&tr.obs);
        Ok(Standardization {
            u_mean,
            u_std,
            y_mean,
            y_std,
        })
    }

    pub fn identity(d_u: usize, d_y: usize) -> Self {
        Standardization {
            u_mean: Array1::zeros(d_u),
            u_std: Array1::ones(d_u),
            y_mean: Array1::zeros(d_y),
            y_std: Array1::ones(d_y),
        }
    }

    pub fn normalize_u(&self, u: ArrayView2<f64>) -> Array2<f64> {
        (&u - &self.u_mean) / &self.u_std
    }

    pub fn denormalize_u(&self, z: ArrayView2<f64>) -> Array2<f64> {
        &z * &self.u_std + &self.u_mean
    }

    pub fn normalize_y(&self, y: ArrayView2<f64>) -> Array2<f64> {
        (&y - &self.y_mean) / &self.y_std
    }

    /// `log |det ∂u/∂z|` of the state denormalization.
    pub fn u_log_scale(&self) -> f64 {
        self.u_std.iter().map(|s| s.ln()).sum()
    }
}

/// Any benchmark model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "model", rename_all = "kebab-case")]
pub enum ModelSpec {
    AdvDiff(AdvDiffSpec),
    Sv(SvSpec),
    Burgers(BurgersSpec),
    Lorenz(LorenzSpec),
}

impl ModelSpec {
    pub fn name(&self) -> &'static str {
        match self {
            ModelSpec::AdvDiff(_) => "adv-diff",
            ModelSpec::Sv(_) => "sv",
            ModelSpec::Burgers(_) => "burgers",
            ModelSpec::Lorenz(_) => "lorenz",
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            ModelSpec::AdvDiff(s) => build_advdiff(s).map(|_| ()),
            ModelSpec::Sv(s) => s.validate(),
            ModelSpec::Burgers(s) => s.validate(),
            ModelSpec::Lorenz(s) => s.validate(),
        }
    }

    pub fn state_dim(&self) -> usize {
        match self {
            ModelSpec::AdvDiff(s) => s.n,
            ModelSpec::Sv(s) => s.dim(),
            ModelSpec::Burgers(s) => s.points,
            ModelSpec::Lorenz(s) => s.k,
        }
    }

    pub fn obs_dim(&self) -> usize {
        match self {
            ModelSpec::AdvDiff(s) => s.obs_dim(),
            ModelSpec::Sv(s) => s.dim(),
            ModelSpec::Burgers(s) => s.observed().len(),
            ModelSpec::Lorenz(s) => s.observed().len(),
        }
    }

    /// Exact linear-Gaussian form, when the model has one.
    pub fn linear(&self) -> Option<Result<LinearSsm>> {
        match self {
            ModelSpec::AdvDiff(s) => Some(build_advdiff(s)),
            _ => None,
        }
    }

    pub fn simulate(&self, t: usize, n: usize, rng: &mut impl Rng) -> Result<Trajectories> {
        match self {
            ModelSpec::AdvDiff(s) => simulate_linear(&build_advdiff(s)?, t, n, rng),
            ModelSpec::Sv(s) => simulate_sv(s, t, n, rng),
            ModelSpec::Burgers(s) => simulate_burgers(s, t, n, rng),
            ModelSpec::Lorenz(s) => simulate_lorenz(s, t, n, rng),
        }
    }
}

/// Samples `u_0 ~ N(μ, Σ)` then runs `T` steps of the linear recursion.
pub fn simulate_linear(ssm: &LinearSsm, t: usize, n: usize, rng: &mut impl Rng) -> Result<Trajectories> {
    let du = ssm.state_dim();
    let dy = ssm.obs_dim();
    let l0 = psd_factor(&ssm.sigma0);
    let lq = psd_factor(&ssm.q);
    let lr = psd_factor(&ssm.r);
    let draw = |d: usize, rng: &mut dyn rand::RngCore| DVector::from_fn(d, |_, _| StandardNormal.sample(rng));
    let mut states = Array3::zeros((n, t, du));
    let mut obs = Array3::zeros((n, t, dy));
    for r in 0..n {
        let mut u = &ssm.mu0 + &l0 * draw(du, rng);
        for k in 0..t {
            u = &ssm.m * &u + &lq * draw(du, rng);
            let y = &ssm.h * &u + &lr * draw(dy, rng);
            for i in 0..du {
                states[[r, k, i]] = u[i];
            }
            for i in 0..dy {
                obs[[r, k, i]] = y[i];
            }
        }
    }
    Ok(Trajectories { states, obs })
}
