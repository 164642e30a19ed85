//! Density factors consumed by the particle filters, and their closed-form
//! versions for models with explicit transition and likelihood.
//!
//! Every method works on row-stacked physical-unit arrays. Observation
//! arguments hold either one row (broadcast) or one row per particle.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use ndarray::{Array1, Array2, ArrayView2};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{shape_err, Error, Result};
use crate::gaussian::{one_step_gain, symmetrize, LinearSsm};
use crate::ssm::lorenz::{drift, LorenzSpec};
use crate::ssm::{ModelSpec, SvSpec};

const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// Fully adapted factorization `p(y_k | u_{k-1}) p(u_k | y_k, u_{k-1})`.
pub trait AdaptedFactors {
    fn state_dim(&self) -> usize;
    fn obs_dim(&self) -> usize;
    fn predictive_log_density(&self, y: ArrayView2<f64>, u_prev: ArrayView2<f64>) -> Result<Array1<f64>>;
    fn sample_predictive<R: Rng>(&self, u_prev: ArrayView2<f64>, rng: &mut R) -> Result<Array2<f64>>;
    fn proposal_log_density(
        &self,
        u: ArrayView2<f64>,
        y: ArrayView2<f64>,
        u_prev: ArrayView2<f64>,
    ) -> Result<Array1<f64>>;
    fn sample_proposal<R: Rng>(&self, y: ArrayView2<f64>, u_prev: ArrayView2<f64>, rng: &mut R) -> Result<Array2<f64>>;
}

/// Conventional factorization `p(u_k | u_{k-1}) p(y_k | u_k)` used by the
/// bootstrap filter.
pub trait BootstrapFactors {
    fn sample_transition<R: Rng>(&self, u_prev: ArrayView2<f64>, rng: &mut R) -> Result<Array2<f64>>;
    fn likelihood_log_density(&self, y: ArrayView2<f64>, u: ArrayView2<f64>) -> Result<Array1<f64>>;
}

/// Explicit densities of the true model.
pub trait ExactModel {
    fn transition_log_density(&self, u: ArrayView2<f64>, u_prev: ArrayView2<f64>) -> Result<Array1<f64>>;
    fn likelihood_log_density(&self, y: ArrayView2<f64>, u: ArrayView2<f64>) -> Result<Array1<f64>>;
}

/// Row `i`, or row 0 when `a` has a single row.
pub(crate) fn row_or_first(a: &ArrayView2<f64>, i: usize) -> usize {
    if a.nrows() == 1 {
        0
    } else {
        i
    }
}

pub(crate) fn check_rows(op: &'static str, a: &ArrayView2<f64>, n: usize, d: usize) -> Result<()> {
    if a.ncols() != d || (a.nrows() != 1 && a.nrows() != n) {
        return Err(shape_err(
            op,
            format!("1 or {n} rows of width {d}"),
            format!("{:?}", a.dim()),
        ));
    }
    Ok(())
}

/// `N(mean, Σ)` noise with a fixed covariance.
#[derive(Debug, Clone)]
pub struct GaussianNoise {
    chol: Cholesky<f64, Dyn>,
    log_norm: f64,
}

impl GaussianNoise {
    pub fn new(cov: &DMatrix<f64>, context: &str) -> Result<Self> {
        let chol = Cholesky::new(symmetrize(cov)).ok_or_else(|| Error::Singular(context.to_string()))?;
        let logdet = 2.0 * chol.l_dirty().diagonal().iter().map(|v| v.ln()).sum::<f64>();
        let d = cov.nrows() as f64;
        Ok(GaussianNoise {
            chol,
            log_norm: -0.5 * (d * LN_2PI + logdet),
        })
    }

    pub fn dim(&self) -> usize {
        self.chol.l_dirty().nrows()
    }

    pub fn log_density(&self, diff: &DVector<f64>) -> f64 {
        let l = self.chol.l();
        let z = l.solve_lower_triangular(diff).expect("nonsingular factor");
        self.log_norm - 0.5 * z.norm_squared()
    }

    pub fn draw<R: Rng>(&self, rng: &mut R) -> DVector<f64> {
        let z = DVector::from_fn(self.dim(), |_, _| rng.sample::<f64, _>(StandardNormal));
        self.chol.l() * z
    }
}

fn dvec(a: &ArrayView2<f64>, i: usize) -> DVector<f64> {
    DVector::from_iterator(a.ncols(), a.row(i).iter().copied())
}

/// Closed-form factors of a linear-Gaussian model.
#[derive(Debug, Clone)]
pub struct LinearFactors {
    pub ssm: LinearSsm,
    hm: DMatrix<f64>,
    gain: DMatrix<f64>,
    predictive: GaussianNoise,
    proposal: GaussianNoise,
    transition: GaussianNoise,
    likelihood: GaussianNoise,
}

impl LinearFactors {
    pub fn new(ssm: LinearSsm) -> Result<Self> {
        let s = &ssm.h * &ssm.q * ssm.h.transpose() + &ssm.r;
        let (gain, post_cov) = one_step_gain(&ssm)?;
        Ok(LinearFactors {
            hm: &ssm.h * &ssm.m,
            gain,
            predictive: GaussianNoise::new(&s, "predictive covariance")?,
            proposal: GaussianNoise::new(&post_cov, "proposal covariance")?,
            transition: GaussianNoise::new(&ssm.q, "process noise covariance")?,
            likelihood: GaussianNoise::new(&ssm.r, "observation noise covariance")?,
            ssm,
        })
    }

    fn proposal_mean(&self, y: &DVector<f64>, u_prev: &DVector<f64>) -> DVector<f64> {
        let pred = &self.ssm.m * u_prev;
        &pred + &self.gain * (y - &self.hm * u_prev)
    }
}

fn rows(n: usize, d: usize, mut f: impl FnMut(usize) -> DVector<f64>) -> Array2<f64> {
    let mut out = Array2::zeros((n, d));
    for i in 0..n {
        let v = f(i);
        for j in 0..d {
            out[[i, j]] = v[j];
        }
    }
    out
}

impl AdaptedFactors for LinearFactors {
    fn state_dim(&self) -> usize {
        self.ssm.state_dim()
    }

    fn obs_dim(&self) -> usize {
        self.ssm.obs_dim()
    }

    fn predictive_log_density(&self, y: ArrayView2<f64>, u_prev: ArrayView2<f64>) -> Result<Array1<f64>> {
        let n = u_prev.nrows();
        check_rows("predictive_log_density", &y, n, self.obs_dim())?;
        Ok((0..n)
            .map(|i| {
                let diff = dvec(&y, row_or_first(&y, i)) - &self.hm * dvec(&u_prev, i);
                self.predictive.log_density(&diff)
            })
            .collect())
    }

    fn sample_predictive<R: Rng>(&self, u_prev: ArrayView2<f64>, rng: &mut R) -> Result<Array2<f64>> {
        Ok(rows(u_prev.nrows(), self.obs_dim(), |i| {
            &self.hm * dvec(&u_prev, i) + self.predictive.draw(rng)
        }))
    }

    fn proposal_log_density(
        &self,
        u: ArrayView2<f64>,
        y: ArrayView2<f64>,
        u_prev: ArrayView2<f64>,
    ) -> Result<Array1<f64>> {
        let n = u.nrows();
        check_rows("proposal_log_density", &y, n, self.obs_dim())?;
        check_rows("proposal_log_density", &u_prev, n, self.state_dim())?;
        Ok((0..n)
            .map(|i| {
                let mean = self.proposal_mean(&dvec(&y, row_or_first(&y, i)), &dvec(&u_prev, row_or_first(&u_prev, i)));
                self.proposal.log_density(&(dvec(&u, i) - mean))
            })
            .collect())
    }

    fn sample_proposal<R: Rng>(&self, y: ArrayView2<f64>, u_prev: ArrayView2<f64>, rng: &mut R) -> Result<Array2<f64>> {
        let n = u_prev.nrows();
        check_rows("sample_proposal", &y, n, self.obs_dim())?;
        Ok(rows(n, self.state_dim(), |i| {
            self.proposal_mean(&dvec(&y, row_or_first(&y, i)), &dvec(&u_prev, i)) + self.proposal.draw(rng)
        }))
    }
}

impl BootstrapFactors for LinearFactors {
    fn sample_transition<R: Rng>(&self, u_prev: ArrayView2<f64>, rng: &mut R) -> Result<Array2<f64>> {
        Ok(rows(u_prev.nrows(), self.state_dim(), |i| {
            &self.ssm.m * dvec(&u_prev, i) + self.transition.draw(rng)
        }))
    }

    fn likelihood_log_density(&self, y: ArrayView2<f64>, u: ArrayView2<f64>) -> Result<Array1<f64>> {
        ExactModel::likelihood_log_density(self, y, u)
    }
}

impl ExactModel for LinearFactors {
    fn transition_log_density(&self, u: ArrayView2<f64>, u_prev: ArrayView2<f64>) -> Result<Array1<f64>> {
        let n = u.nrows();
        check_rows("transition_log_density", &u_prev, n, self.state_dim())?;
        Ok((0..n)
            .map(|i| {
                let diff = dvec(&u, i) - &self.ssm.m * dvec(&u_prev, row_or_first(&u_prev, i));
                self.transition.log_density(&diff)
            })
            .collect())
    }

    fn likelihood_log_density(&self, y: ArrayView2<f64>, u: ArrayView2<f64>) -> Result<Array1<f64>> {
        let n = u.nrows();
        check_rows("likelihood_log_density", &y, n, self.obs_dim())?;
        Ok((0..n)
            .map(|i| {
                let diff = dvec(&y, row_or_first(&y, i)) - &self.ssm.h * dvec(&u, i);
                self.likelihood.log_density(&diff)
            })
            .collect())
    }
}

fn normal_log_density(x: f64, mean: f64, std: f64) -> f64 {
    let z = (x - mean) / std;
    -0.5 * (LN_2PI + z * z) - std.ln()
}

/// Diagonal-Gaussian transition `N(mean(u_prev), diag(std²))` and a
/// coordinatewise likelihood; covers the stochastic volatility model and
/// single-step Lorenz-96.
#[derive(Debug, Clone)]
pub enum NonlinearFactors {
    Sv(SvSpec),
    /// Euler–Maruyama with one step per observation interval.
    Lorenz(LorenzSpec),
}

impl NonlinearFactors {
    fn state_dim(&self) -> usize {
        match self {
            NonlinearFactors::Sv(s) => s.dim(),
            NonlinearFactors::Lorenz(s) => s.k,
        }
    }

    fn obs_dim(&self) -> usize {
        match self {
            NonlinearFactors::Sv(s) => s.dim(),
            NonlinearFactors::Lorenz(s) => s.observed().len(),
        }
    }

    /// Transition mean and per-coordinate std for one particle.
    fn transition(&self, u_prev: &[f64]) -> (Vec<f64>, Vec<f64>) {
        match self {
            NonlinearFactors::Sv(s) => (
                (0..s.dim()).map(|i| s.transition_mean(i, u_prev[i])).collect(),
                s.sigma.clone(),
            ),
            NonlinearFactors::Lorenz(s) => {
                let mut du = vec![0.0; s.k];
                drift(s, u_prev, &[], &mut du, &mut []);
                let mean = u_prev.iter().zip(&du).map(|(u, d)| u + s.dt_obs * d).collect();
                (mean, vec![s.sigma_u * s.dt_obs.sqrt(); s.k])
            }
        }
    }

    fn obs_log_density(&self, y: &[f64], u: &[f64]) -> f64 {
        match self {
            NonlinearFactors::Sv(s) => y
                .iter()
                .zip(u)
                .map(|(&yi, &ui)| normal_log_density(yi, 0.0, s.obs_std(ui)))
                .sum(),
            NonlinearFactors::Lorenz(s) => s
                .observed()
                .iter()
                .zip(y)
                .map(|(&j, &yi)| normal_log_density(yi, u[j].powi(3), s.obs_std))
                .sum(),
        }
    }
}

impl BootstrapFactors for NonlinearFactors {
    fn sample_transition<R: Rng>(&self, u_prev: ArrayView2<f64>, rng: &mut R) -> Result<Array2<f64>> {
        let mut out = Array2::zeros((u_prev.nrows(), self.state_dim()));
        for (i, row) in u_prev.outer_iter().enumerate() {
            let (mean, std) = self.transition(&row.to_vec());
            for j in 0..mean.len() {
                out[[i, j]] = mean[j] + std[j] * rng.sample::<f64, _>(StandardNormal);
            }
        }
        Ok(out)
    }

    fn likelihood_log_density(&self, y: ArrayView2<f64>, u: ArrayView2<f64>) -> Result<Array1<f64>> {
        ExactModel::likelihood_log_density(self, y, u)
    }
}

impl ExactModel for NonlinearFactors {
    fn transition_log_density(&self, u: ArrayView2<f64>, u_prev: ArrayView2<f64>) -> Result<Array1<f64>> {
        let n = u.nrows();
        check_rows("transition_log_density", &u_prev, n, self.state_dim())?;
        Ok((0..n)
            .map(|i| {
                let (mean, std) = self.transition(&u_prev.row(row_or_first(&u_prev, i)).to_vec());
                (0..mean.len())
                    .map(|j| normal_log_density(u[[i, j]], mean[j], std[j]))
                    .sum()
            })
            .collect())
    }

    fn likelihood_log_density(&self, y: ArrayView2<f64>, u: ArrayView2<f64>) -> Result<Array1<f64>> {
        let n = u.nrows();
        check_rows("likelihood_log_density", &y, n, self.obs_dim())?;
        Ok((0..n)
            .map(|i| {
                let yr = y.row(row_or_first(&y, i)).to_vec();
                self.obs_log_density(&yr, &u.row(i).to_vec())
            })
            .collect())
    }
}

/// Exact factors of a benchmark, when they exist in closed form.
#[derive(Debug, Clone)]
pub enum ExactFactors {
    Linear(Box<LinearFactors>),
    Nonlinear(NonlinearFactors),
}

impl ExactFactors {
    pub fn for_spec(spec: &ModelSpec) -> Result<Self> {
        match spec {
            ModelSpec::AdvDiff(_) => {
                let ssm = spec.linear().expect("linear model")?;
                Ok(ExactFactors::Linear(Box::new(LinearFactors::new(ssm)?)))
            }
            ModelSpec::Sv(s) => Ok(ExactFactors::Nonlinear(NonlinearFactors::Sv(s.clone()))),
            ModelSpec::Lorenz(s) => {
                if s.two_scale {
                    return Err(Error::Config(
                        "two-scale Lorenz-96 has no explicit slow-variable transition density".into(),
                    ));
                }
                if s.substeps()? != 1 {
                    return Err(Error::Config(format!(
                        "explicit Lorenz-96 transition needs dt_int = dt_obs (one Euler step), got {} substeps",
                        s.substeps()?
                    )));
                }
                if !(s.sigma_u > 0.0) {
                    return Err(Error::Config("explicit Lorenz-96 transition needs sigma_u > 0".into()));
                }
                Ok(ExactFactors::Nonlinear(NonlinearFactors::Lorenz(s.clone())))
            }
            ModelSpec::Burgers(_) => Err(Error::Config("Burgers model has no explicit transition density".into())),
        }
    }
}

impl BootstrapFactors for ExactFactors {
    fn sample_transition<R: Rng>(&self, u_prev: ArrayView2<f64>, rng: &mut R) -> Result<Array2<f64>> {
        match self {
            ExactFactors::Linear(f) => f.sample_transition(u_prev, rng),
            ExactFactors::Nonlinear(f) => f.sample_transition(u_prev, rng),
        }
    }

    fn likelihood_log_density(&self, y: ArrayView2<f64>, u: ArrayView2<f64>) -> Result<Array1<f64>> {
        ExactModel::likelihood_log_density(self, y, u)
    }
}

impl ExactModel for ExactFactors {
    fn transition_log_density(&self, u: ArrayView2<f64>, u_prev: ArrayView2<f64>) -> Result<Array1<f64>> {
        match self {
            ExactFactors::Linear(f) => f.transition_log_density(u, u_prev),
            ExactFactors::Nonlinear(f) => f.transition_log_density(u, u_prev),
        }
    }

    fn likelihood_log_density(&self, y: ArrayView2<f64>, u: ArrayView2<f64>) -> Result<Array1<f64>> {
        match self {
            ExactFactors::Linear(f) => ExactModel::likelihood_log_density(f.as_ref(), y, u),
            ExactFactors::Nonlinear(f) => ExactModel::likelihood_log_density(f, y, u),
        }
    }
}
