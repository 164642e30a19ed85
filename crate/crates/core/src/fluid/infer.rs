//! Sampling from the learned filtering distributions and smoothing paths.

use nalgebra::DVector;
use ndarray::{s, Array1, Array2, Array3, ArrayView1, ArrayView2, Axis};
use rand::Rng;

use super::FluidModel;
use crate::error::{Error, Result};
use crate::gaussian::{
    kalman_filter, rows_to_dvectors, rts_backward_kernel, BackwardKernel, GaussianBelief, LinearSsm,
};

#[derive(Debug, Clone)]
pub struct FilterResult {
    /// 1-based time index.
    pub t: usize,
    /// `N × d_u`, physical units.
    pub samples: Array2<f64>,
    pub summary: Array1<f64>,
}

/// `N × T × d_u` sample paths.
#[derive(Debug, Clone)]
pub struct SmoothingPaths {
    pub paths: Array3<f64>,
}

impl SmoothingPaths {
    pub fn horizon(&self) -> usize {
        self.paths.dim().1
    }

    /// Per-step sample mean, `T × d_u`.
    pub fn mean(&self) -> Array2<f64> {
        self.paths.mean_axis(Axis(0)).expect("nonempty paths")
    }

    /// Steps-major view `(T, N, d_u)` as used by the metrics.
    pub fn steps_major(&self) -> Array3<f64> {
        self.paths
            .view()
            .permuted_axes([1, 0, 2])
            .as_standard_layout()
            .to_owned()
    }
}

/// Draws `n` samples of `u_t | y_{1:t}` where `t = ys.nrows()`.
pub fn filter_samples(ys: ArrayView2<f64>, model: &FluidModel, n: usize, rng: &mut impl Rng) -> Result<FilterResult> {
    let t = ys.nrows();
    if t == 0 {
        return Err(Error::Empty("filtering needs at least one observation".into()));
    }
    let s = model.summaries(ys)?;
    let summary = s.row(t - 1).to_owned();
    let z = model.forward.sample(&model.params, s.slice(s![t - 1..t, ..]), n, rng)?;
    Ok(FilterResult {
        t,
        samples: model.stats().denormalize_u(z.view()),
        summary,
    })
}

/// `log p(u | s)` of the learned filtering density in physical units, for
/// one summary row and many states.
pub fn filter_log_density(model: &FluidModel, summary: ArrayView1<f64>, u: ArrayView2<f64>) -> Result<Array1<f64>> {
    let st = model.stats();
    let c = summary.insert_axis(Axis(0));
    let lp = model.forward.log_prob(&model.params, st.normalize_u(u).view(), c)?;
    Ok(lp - st.u_log_scale())
}

/// `n` filtering samples at 0-based step `k` of precomputed summaries.
pub fn filter_step(
    model: &FluidModel,
    summaries: ArrayView2<f64>,
    k: usize,
    n: usize,
    rng: &mut impl Rng,
) -> Result<Array2<f64>> {
    if k >= summaries.nrows() {
        return Err(Error::OutOfRange {
            index: k + 1,
            len: summaries.nrows(),
        });
    }
    let z = model
        .forward
        .sample(&model.params, summaries.slice(s![k..k + 1, ..]), n, rng)?;
    Ok(model.stats().denormalize_u(z.view()))
}

/// Filtering samples at every step `1..=T` from one encoder pass,
/// `(T, N, d_u)`.
pub fn filter_series(ys: ArrayView2<f64>, model: &FluidModel, n: usize, rng: &mut impl Rng) -> Result<Array3<f64>> {
    let t = ys.nrows();
    if t == 0 {
        return Err(Error::Empty("filtering needs at least one observation".into()));
    }
    let s = model.summaries(ys)?;
    let st = model.stats();
    let mut out = Array3::zeros((t, n, model.state_dim));
    for k in 0..t {
        let z = model.forward.sample(&model.params, s.slice(s![k..k + 1, ..]), n, rng)?;
        out.index_axis_mut(Axis(0), k).assign(&st.denormalize_u(z.view()));
    }
    Ok(out)
}

/// Terminal draw plus backward kernels, in whatever units the sampler uses
/// internally.
pub trait PathSampler {
    fn horizon(&self) -> usize;
    fn terminal<R: Rng>(&self, n: usize, rng: &mut R) -> Result<Array2<f64>>;
    /// Draws `u_k` given each row of `u_next = u_{k+1}`; `k` is 0-based.
    fn backward<R: Rng>(&self, k: usize, u_next: ArrayView2<f64>, rng: &mut R) -> Result<Array2<f64>>;
    fn to_physical(&self, u: Array2<f64>) -> Array2<f64> {
        u
    }
}

/// Runs the backward recursion and returns `(N, T, d)` paths.
pub fn backward_recursion<S: PathSampler, R: Rng>(sampler: &S, n: usize, rng: &mut R) -> Result<SmoothingPaths> {
    let t = sampler.horizon();
    if t == 0 {
        return Err(Error::Empty("smoothing horizon".into()));
    }
    let mut steps = Vec::with_capacity(t);
    steps.push(sampler.terminal(n, rng)?);
    for k in (0..t - 1).rev() {
        let next = steps.last().expect("terminal present").view();
        let u = sampler.backward(k, next, rng)?;
        steps.push(u);
    }
    steps.reverse();
    let d = steps[0].ncols();
    let mut paths = Array3::zeros((n, t, d));
    for (k, u) in steps.into_iter().enumerate() {
        paths.slice_mut(s![.., k, ..]).assign(&sampler.to_physical(u));
    }
    Ok(SmoothingPaths { paths })
}

struct FluidSampler<'a> {
    model: &'a FluidModel,
    s_fwd: Array2<f64>,
    s_bwd: Array2<f64>,
    /// Normalized terminal draws to use instead of sampling.
    fixed_terminal: Option<Array2<f64>>,
}

impl PathSampler for FluidSampler<'_> {
    fn horizon(&self) -> usize {
        self.s_fwd.nrows()
    }

    fn terminal<R: Rng>(&self, n: usize, rng: &mut R) -> Result<Array2<f64>> {
        if let Some(z) = &self.fixed_terminal {
            return Ok(z.clone());
        }
        let t = self.horizon();
        self.model
            .forward
            .sample(&self.model.params, self.s_fwd.slice(s![t - 1..t, ..]), n, rng)
    }

    fn backward<R: Rng>(&self, k: usize, u_next: ArrayView2<f64>, rng: &mut R) -> Result<Array2<f64>> {
        let n = u_next.nrows();
        let s_k = self.s_bwd.row(k);
        let s_rep = s_k.broadcast((n, s_k.len())).expect("row broadcast");
        let cond = ndarray::concatenate![Axis(1), u_next, s_rep];
        self.model.backward.sample(&self.model.params, cond.view(), n, rng)
    }

    fn to_physical(&self, u: Array2<f64>) -> Array2<f64> {
        self.model.stats().denormalize_u(u.view())
    }
}

/// Draws `n` smoothing paths for `y_{1:t}`, `t = ys.nrows() >= 2`. The
/// terminal slice uses the same draws as [`filter_samples`] with the same
/// generator state.
pub fn smooth_paths(ys: ArrayView2<f64>, model: &FluidModel, n: usize, rng: &mut impl Rng) -> Result<SmoothingPaths> {
    if ys.nrows() < 2 {
        return Err(Error::Config(format!("smoothing needs t >= 2, got {}", ys.nrows())));
    }
    let sampler = FluidSampler {
        model,
        s_fwd: model.summaries(ys)?,
        s_bwd: model.summaries_bwd(ys)?,
        fixed_terminal: None,
    };
    backward_recursion(&sampler, n, rng)
}

/// Smoothing paths whose terminal slice is the given filtering sample
/// (`N × d_u`, physical units); only the backward recursion draws from
/// `rng`.
pub fn smooth_paths_from(
    ys: ArrayView2<f64>,
    model: &FluidModel,
    terminal: ArrayView2<f64>,
    rng: &mut impl Rng,
) -> Result<SmoothingPaths> {
    if ys.nrows() < 2 {
        return Err(Error::Config(format!("smoothing needs t >= 2, got {}", ys.nrows())));
    }
    if terminal.ncols() != model.state_dim {
        return Err(crate::error::shape_err(
            "terminal sample",
            model.state_dim,
            terminal.ncols(),
        ));
    }
    let sampler = FluidSampler {
        model,
        s_fwd: model.summaries(ys)?,
        s_bwd: model.summaries_bwd(ys)?,
        fixed_terminal: Some(model.stats().normalize_u(terminal)),
    };
    backward_recursion(&sampler, terminal.nrows(), rng)
}

/// Samples at 1-based step `k`.
pub fn smoothing_marginal(paths: &SmoothingPaths, k: usize) -> Result<Array2<f64>> {
    let t = paths.horizon();
    if k == 0 || k > t {
        return Err(Error::OutOfRange { index: k, len: t });
    }
    Ok(paths.paths.slice(s![.., k - 1, ..]).to_owned())
}

/// Exact linear-Gaussian path sampler: terminal Kalman filter plus RTS
/// backward kernels.
pub struct KalmanPathSampler {
    terminal: GaussianBelief,
    kernels: Vec<BackwardKernel>,
}

impl KalmanPathSampler {
    pub fn new(ssm: &LinearSsm, ys: ArrayView2<f64>) -> Result<Self> {
        let run = kalman_filter(ssm, &rows_to_dvectors(ys))?;
        let t = run.filtered.len();
        if t == 0 {
            return Err(Error::Empty("observation sequence".into()));
        }
        let kernels = run.filtered[..t - 1]
            .iter()
            .map(|f| rts_backward_kernel(f, ssm))
            .collect::<Result<Vec<_>>>()?;
        Ok(KalmanPathSampler {
            terminal: run.filtered[t - 1].clone(),
            kernels,
        })
    }
}

impl PathSampler for KalmanPathSampler {
    fn horizon(&self) -> usize {
        self.kernels.len() + 1
    }

    fn terminal<R: Rng>(&self, n: usize, rng: &mut R) -> Result<Array2<f64>> {
        Ok(self.terminal.sample(n, rng))
    }

    fn backward<R: Rng>(&self, k: usize, u_next: ArrayView2<f64>, rng: &mut R) -> Result<Array2<f64>> {
        Ok(self.kernels[k].sample_rows(u_next, rng))
    }
}

/// Exact filtering beliefs for every step of `ys`.
pub fn kalman_beliefs(ssm: &LinearSsm, ys: ArrayView2<f64>) -> Result<Vec<GaussianBelief>> {
    let obs: Vec<DVector<f64>> = rows_to_dvectors(ys);
    Ok(kalman_filter(ssm, &obs)?.filtered)
}
