//! Flow-based particle filtering with a fully adapted proposal, a bootstrap
//! variant and importance-weight diagnostics.

pub mod factors;
pub mod model;

use ndarray::{s, Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::ssm::lorenz::initial_state;
use crate::ssm::ModelSpec;

pub use factors::{AdaptedFactors, BootstrapFactors, ExactFactors, ExactModel, LinearFactors, NonlinearFactors};
pub use model::{train_pf_flows, PfModel, PfTrainConfig, Triples};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Resampler {
    #[default]
    Multinomial,
    Systematic,
}

#[derive(Debug, Clone)]
pub struct ParticleEnsemble {
    /// `N × d_u`.
    pub particles: Array2<f64>,
    /// Normalized weights.
    pub weights: Array1<f64>,
    /// Ancestor of each particle in the previous ensemble.
    pub ancestors: Vec<usize>,
    /// RESS of the weights that drove the last resampling (1 for a fresh
    /// ensemble).
    pub ress: f64,
}

impl ParticleEnsemble {
    /// Equally weighted ensemble.
    pub fn uniform(particles: Array2<f64>) -> Result<Self> {
        let n = particles.nrows();
        if n == 0 {
            return Err(Error::Empty("particle ensemble".into()));
        }
        Ok(ParticleEnsemble {
            particles,
            weights: Array1::from_elem(n, 1.0 / n as f64),
            ancestors: (0..n).collect(),
            ress: 1.0,
        })
    }

    pub fn len(&self) -> usize {
        self.particles.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn mean(&self) -> Array1<f64> {
        self.weights.dot(&self.particles)
    }
}

/// Normalized weights from log-weights; non-finite entries count as zero.
pub fn normalize_log_weights(log_w: &Array1<f64>) -> Result<Array1<f64>> {
    let max = log_w
        .iter()
        .copied()
        .filter(|x| x.is_finite())
        .fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        let raw_max = log_w.iter().copied().fold(f64::NAN, f64::max);
        return Err(Error::Degenerate {
            max_log_weight: raw_max,
        });
    }
    let w = log_w.mapv(|x| if x.is_finite() { (x - max).exp() } else { 0.0 });
    let total = w.sum();
    Ok(w / total)
}

/// `(ESS, RESS)` of unnormalized or normalized weights.
pub fn ess(weights: ArrayView1<f64>) -> (f64, f64) {
    let n = weights.len() as f64;
    let sum: f64 = weights.sum();
    let sq: f64 = weights.iter().map(|w| w * w).sum();
    let e = sum * sum / sq;
    (e, e / n)
}

/// Ancestor indices drawn from normalized `weights`.
pub fn resample<R: Rng>(weights: &Array1<f64>, n: usize, scheme: Resampler, rng: &mut R) -> Vec<usize> {
    let mut cdf = Vec::with_capacity(weights.len());
    let mut acc = 0.0;
    for &w in weights {
        acc += w;
        cdf.push(acc);
    }
    let last = weights.len() - 1;
    let find = |u: f64| cdf.partition_point(|&c| c <= u * acc).min(last);
    match scheme {
        Resampler::Multinomial => (0..n).map(|_| find(rng.random::<f64>())).collect(),
        Resampler::Systematic => {
            let u0: f64 = rng.random();
            (0..n).map(|j| find((j as f64 + u0) / n as f64)).collect()
        }
    }
}

fn check_obs(y: &ArrayView1<f64>, d: usize) -> Result<()> {
    if y.len() != d {
        return Err(shape_err("particle filter observation", d, y.len()));
    }
    Ok(())
}

/// One fully adapted step: predictive weighting, resampling, propagation.
pub fn pf_step<F: AdaptedFactors, R: Rng>(
    ens: &ParticleEnsemble,
    y: ArrayView1<f64>,
    model: &F,
    resampler: Resampler,
    rng: &mut R,
) -> Result<ParticleEnsemble> {
    check_obs(&y, model.obs_dim())?;
    let n = ens.len();
    let y_row = y.insert_axis(Axis(0));
    let log_pred = model.predictive_log_density(y_row, ens.particles.view())?;
    let log_w = ens.weights.mapv(f64::ln) + log_pred;
    let aux = normalize_log_weights(&log_w)?;
    let ress = ess(aux.view()).1;
    let ancestors = resample(&aux, n, resampler, rng);
    let parents = ens.particles.select(Axis(0), &ancestors);
    let particles = model.sample_proposal(y_row, parents.view(), rng)?;
    Ok(ParticleEnsemble {
        particles,
        weights: Array1::from_elem(n, 1.0 / n as f64),
        ancestors,
        ress,
    })
}

/// Propagate with the transition, weight with the likelihood, resample.
pub fn bootstrap_pf_step<F: BootstrapFactors, R: Rng>(
    ens: &ParticleEnsemble,
    y: ArrayView1<f64>,
    model: &F,
    resampler: Resampler,
    rng: &mut R,
) -> Result<ParticleEnsemble> {
    let n = ens.len();
    let moved = model.sample_transition(ens.particles.view(), rng)?;
    let y_row = y.insert_axis(Axis(0));
    let log_w = ens.weights.mapv(f64::ln) + model.likelihood_log_density(y_row, moved.view())?;
    let w = normalize_log_weights(&log_w)?;
    let ress = ess(w.view()).1;
    let ancestors = resample(&w, n, resampler, rng);
    Ok(ParticleEnsemble {
        particles: moved.select(Axis(0), &ancestors),
        weights: Array1::from_elem(n, 1.0 / n as f64),
        ancestors,
        ress,
    })
}

/// Filters `ys` (`T × d_y`) from an initial equally weighted ensemble of
/// `u_0` samples; entry `k` approximates `p(u_{k+1} | y_{1:k+1})`.
pub fn run_pf<F: AdaptedFactors, R: Rng>(
    ys: ArrayView2<f64>,
    init: Array2<f64>,
    model: &F,
    resampler: Resampler,
    rng: &mut R,
) -> Result<Vec<ParticleEnsemble>> {
    let mut ens = ParticleEnsemble::uniform(init)?;
    let mut out = Vec::with_capacity(ys.nrows());
    for y in ys.outer_iter() {
        ens = pf_step(&ens, y, model, resampler, rng)?;
        out.push(ens.clone());
    }
    Ok(out)
}

pub fn run_bootstrap_pf<F: BootstrapFactors, R: Rng>(
    ys: ArrayView2<f64>,
    init: Array2<f64>,
    model: &F,
    resampler: Resampler,
    rng: &mut R,
) -> Result<Vec<ParticleEnsemble>> {
    let mut ens = ParticleEnsemble::uniform(init)?;
    let mut out = Vec::with_capacity(ys.nrows());
    for y in ys.outer_iter() {
        ens = bootstrap_pf_step(&ens, y, model, resampler, rng)?;
        out.push(ens.clone());
    }
    Ok(out)
}

/// Weighted means of a filter run, `T × d_u`.
pub fn ensemble_means(run: &[ParticleEnsemble]) -> Array2<f64> {
    let d = run.first().map_or(0, |e| e.particles.ncols());
    let mut out = Array2::zeros((run.len(), d));
    for (k, e) in run.iter().enumerate() {
        out.row_mut(k).assign(&e.mean());
    }
    out
}

/// Draws `n` samples of `u_0` from the model's initial distribution.
pub fn initial_particles<R: Rng>(spec: &ModelSpec, n: usize, rng: &mut R) -> Result<Array2<f64>> {
    match spec {
        ModelSpec::AdvDiff(_) => Ok(spec.linear().expect("linear model")?.prior().sample(n, rng)),
        ModelSpec::Sv(s) => {
            let tau = s.tau2().mapv(f64::sqrt);
            let z = crate::flows::standard_normal((n, s.dim()), rng);
            Ok(z * &tau)
        }
        ModelSpec::Burgers(s) => {
            let u0 = s.initial();
            Ok(u0.broadcast((n, u0.len())).expect("row").to_owned())
        }
        ModelSpec::Lorenz(s) => {
            let mut out = Array2::zeros((n, s.k));
            for mut r in out.outer_iter_mut() {
                let (u, _) = initial_state(s, rng);
                r.assign(&Array1::from(u));
            }
            Ok(out)
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EssReport {
    pub ess: f64,
    pub ress: f64,
    pub chi2: f64,
    pub samples: usize,
}

/// Importance-weight diagnostic of the learned joint
/// `q = p_θ4(u | y, u_prev) p_θ3(y | u_prev) p(u_prev)` against the exact
/// `p(u | u_prev) p(y | u) p(u_prev)`. Rows of `u_prev` are draws from the
/// previous-step distribution; `y` and then `u` are sampled from the
/// learned factors in that order.
pub fn ess_diagnostic<F: AdaptedFactors, E: ExactModel, R: Rng>(
    u_prev: ArrayView2<f64>,
    exact: &E,
    model: &F,
    rng: &mut R,
) -> Result<EssReport> {
    let n = u_prev.nrows();
    if n == 0 {
        return Err(Error::Empty("ESS diagnostic samples".into()));
    }
    let y = model.sample_predictive(u_prev, rng)?;
    let u = model.sample_proposal(y.view(), u_prev, rng)?;
    let log_p = exact.transition_log_density(u.view(), u_prev)? + exact.likelihood_log_density(y.view(), u.view())?;
    let log_q =
        model.proposal_log_density(u.view(), y.view(), u_prev)? + model.predictive_log_density(y.view(), u_prev)?;
    let log_w = log_p - log_q;
    if log_w.iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFinite {
            op: "ESS importance weights".into(),
        });
    }
    Ok(ess_from_log_weights(&log_w))
}

/// ESS statistics from log-weights, computed with a max shift.
pub fn ess_from_log_weights(log_w: &Array1<f64>) -> EssReport {
    let n = log_w.len();
    let max = log_w.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
    let w = log_w.mapv(|x| (x - max).exp());
    let (e, r) = ess(w.view());
    EssReport {
        ess: e,
        ress: r,
        chi2: n as f64 / e - 1.0,
        samples: n,
    }
}

/// RESS at each step `t = 2..=T`, drawing `u_{t-1}` from the rows of
/// `states[:, t-2, :]` (an `N × T × d_u` sample of state paths).
pub fn ress_series<F: AdaptedFactors, E: ExactModel, R: Rng>(
    states: &ndarray::Array3<f64>,
    exact: &E,
    model: &F,
    rng: &mut R,
) -> Result<Vec<(usize, EssReport)>> {
    let t = states.dim().1;
    (1..t)
        .map(|k| {
            let u_prev = states.slice(s![.., k - 1, ..]);
            ess_diagnostic(u_prev, exact, model, rng).map(|r| (k + 1, r))
        })
        .collect()
}
