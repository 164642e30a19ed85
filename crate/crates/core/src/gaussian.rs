//! Closed-form references for the linear-Gaussian model
//!
//! ```text
//! u_0 ~ N(mu0, Sigma0)
//! u_k = M u_{k-1} + w_k,   w_k ~ N(0, Q)
//! y_k = H u_k + v_k,       v_k ~ N(0, R)
//! ```
//!
//! Kalman filtering, the RTS backward kernel, the single-step posterior
//! `p(u_k | u_{k-1}, y_k)`, the predictive density `p(y_{k+1} | u_k)`, and
//! KL divergences against Gaussians or arbitrary log-densities.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn, SymmetricEigen};
use ndarray::{Array1, Array2, ArrayView2};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{shape_err, Error, Result};

const JITTERS: [f64; 5] = [1e-10, 1e-9, 1e-8, 1e-7, 1e-6];

#[derive(Debug, Clone, PartialEq)]
pub struct LinearSsm {
    pub m: DMatrix<f64>,
    pub h: DMatrix<f64>,
    pub q: DMatrix<f64>,
    pub r: DMatrix<f64>,
    pub mu0: DVector<f64>,
    pub sigma0: DMatrix<f64>,
}

impl LinearSsm {
    pub fn new(
        m: DMatrix<f64>,
        h: DMatrix<f64>,
        q: DMatrix<f64>,
        r: DMatrix<f64>,
        mu0: DVector<f64>,
        sigma0: DMatrix<f64>,
    ) -> Result<Self> {
        let n = m.nrows();
        let ny = h.nrows();
        let ok = m.is_square()
            && h.ncols() == n
            && q.shape() == (n, n)
            && r.shape() == (ny, ny)
            && mu0.len() == n
            && sigma0.shape() == (n, n);
        if !ok {
            return Err(shape_err(
                "LinearSsm::new",
                format!("M {n}×{n}, H {ny}×{n}, Q {n}×{n}, R {ny}×{ny}"),
                format!(
                    "M {:?}, H {:?}, Q {:?}, R {:?}, mu0 {}, Sigma0 {:?}",
                    m.shape(),
                    h.shape(),
                    q.shape(),
                    r.shape(),
                    mu0.len(),
                    sigma0.shape()
                ),
            ));
        }
        let sym = |a: &DMatrix<f64>| (a - a.transpose()).amax() <= 1e-12 * a.amax().max(1.0);
        if !sym(&q) || !sym(&r) || !sym(&sigma0) {
            return Err(Error::Config("Q, R and Sigma0 must be symmetric".into()));
        }
        if min_eigenvalue(&q) < -1e-10 || min_eigenvalue(&sigma0) < -1e-10 {
            return Err(Error::Config("Q and Sigma0 must be positive semidefinite".into()));
        }
        if min_eigenvalue(&r) <= 0.0 {
            return Err(Error::Config("R must be positive definite".into()));
        }
        Ok(LinearSsm {
            m,
            h,
            q,
            r,
            mu0,
            sigma0,
        })
    }

    pub fn state_dim(&self) -> usize {
        self.m.nrows()
    }

    pub fn obs_dim(&self) -> usize {
        self.h.nrows()
    }

    pub fn prior(&self) -> GaussianBelief {
        GaussianBelief {
            mean: self.mu0.clone(),
            cov: self.sigma0.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GaussianBelief {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
}

impl GaussianBelief {
    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    /// Per-coordinate standard deviations.
    pub fn std(&self) -> DVector<f64> {
        self.cov.diagonal().map(|v| v.max(0.0).sqrt())
    }

    /// `n` draws as rows.
    pub fn sample(&self, n: usize, rng: &mut impl Rng) -> Array2<f64> {
        let factor = psd_factor(&self.cov);
        let d = self.dim();
        let mut out = Array2::zeros((n, d));
        let mut z = DVector::zeros(d);
        for mut row in out.rows_mut() {
            for zi in z.iter_mut() {
                *zi = StandardNormal.sample(rng);
            }
            let x = &self.mean + &factor * &z;
            for (o, v) in row.iter_mut().zip(x.iter()) {
                *o = *v;
            }
        }
        out
    }

    /// Row-wise log-density.
    pub fn log_density_rows(&self, x: ArrayView2<f64>) -> Result<Array1<f64>> {
        if x.ncols() != self.dim() {
            return Err(shape_err("log_density_rows", self.dim(), x.ncols()));
        }
        let chol = cholesky_jitter(&self.cov, "Gaussian log-density")?;
        let logdet = chol_logdet(&chol);
        let d = self.dim() as f64;
        let mut out = Array1::zeros(x.nrows());
        for (i, row) in x.rows().into_iter().enumerate() {
            let diff = DVector::from_iterator(self.dim(), row.iter().copied()) - &self.mean;
            let sol = chol.solve(&diff);
            out[i] = -0.5 * (d * (2.0 * std::f64::consts::PI).ln() + logdet + diff.dot(&sol));
        }
        Ok(out)
    }
}

pub(crate) fn symmetrize(a: &DMatrix<f64>) -> DMatrix<f64> {
    (a + a.transpose()) * 0.5
}

pub fn min_eigenvalue(a: &DMatrix<f64>) -> f64 {
    if a.is_empty() {
        return 0.0;
    }
    SymmetricEigen::new(symmetrize(a)).eigenvalues.min()
}

/// `L` with `L Lᵀ = A` for a symmetric PSD `A`, via eigendecomposition so
/// singular covariances are handled.
pub fn psd_factor(a: &DMatrix<f64>) -> DMatrix<f64> {
    let eig = SymmetricEigen::new(symmetrize(a));
    let sqrt = eig.eigenvalues.map(|l| l.max(0.0).sqrt());
    &eig.eigenvectors * DMatrix::from_diagonal(&sqrt)
}

/// Cholesky factorization, retrying with diagonal jitter `1e-10 … 1e-6`
/// (scaled by the mean diagonal magnitude) when the plain factorization
/// fails.
pub fn cholesky_jitter(a: &DMatrix<f64>, context: &str) -> Result<Cholesky<f64, Dyn>> {
    let sym = symmetrize(a);
    if let Some(c) = Cholesky::new(sym.clone()) {
        return Ok(c);
    }
    let n = a.nrows();
    let scale = (sym.trace().abs() / n.max(1) as f64).max(1.0);
    for j in JITTERS {
        let shifted = &sym + DMatrix::identity(n, n) * (j * scale);
        if let Some(c) = Cholesky::new(shifted) {
            return Ok(c);
        }
    }
    Err(Error::Singular(context.to_string()))
}

fn chol_logdet(c: &Cholesky<f64, Dyn>) -> f64 {
    2.0 * c.l_dirty().diagonal().iter().map(|v| v.ln()).sum::<f64>()
}

/// Prediction step `(M m, M P Mᵀ + Q)`.
pub fn kalman_predict(belief: &GaussianBelief, ssm: &LinearSsm) -> GaussianBelief {
    GaussianBelief {
        mean: &ssm.m * &belief.mean,
        cov: symmetrize(&(&ssm.m * &belief.cov * ssm.m.transpose() + &ssm.q)),
    }
}

/// Measurement update with the Joseph-form covariance.
pub fn kalman_update(pred: &GaussianBelief, y: &DVector<f64>, ssm: &LinearSsm) -> Result<GaussianBelief> {
    if y.len() != ssm.obs_dim() {
        return Err(shape_err("kalman_update", ssm.obs_dim(), y.len()));
    }
    let h = &ssm.h;
    let s = h * &pred.cov * h.transpose() + &ssm.r;
    let chol = cholesky_jitter(&s, "innovation covariance")?;
    // K = P Hᵀ S⁻¹ = (S⁻¹ H P)ᵀ
    let gain = chol.solve(&(h * &pred.cov)).transpose();
    let innovation = y - h * &pred.mean;
    let mean = &pred.mean + &gain * innovation;
    let n = pred.dim();
    let ikh = DMatrix::identity(n, n) - &gain * h;
    let cov = &ikh * &pred.cov * ikh.transpose() + &gain * &ssm.r * gain.transpose();
    Ok(GaussianBelief {
        mean,
        cov: symmetrize(&cov),
    })
}

/// Filtering pass from the prior on `u_0`. Index `k` of both vectors refers
/// to time `k+1`.
#[derive(Debug, Clone)]
pub struct KalmanRun {
    pub predicted: Vec<GaussianBelief>,
    pub filtered: Vec<GaussianBelief>,
}

pub fn kalman_filter(ssm: &LinearSsm, ys: &[DVector<f64>]) -> Result<KalmanRun> {
    let mut belief = ssm.prior();
    let mut predicted = Vec::with_capacity(ys.len());
    let mut filtered = Vec::with_capacity(ys.len());
    for y in ys {
        let pred = kalman_predict(&belief, ssm);
        belief = kalman_update(&pred, y, ssm)?;
        predicted.push(pred);
        filtered.push(belief.clone());
    }
    Ok(KalmanRun { predicted, filtered })
}

/// Classical RTS smoothing recursion over a filtering pass.
pub fn rts_smoother(ssm: &LinearSsm, run: &KalmanRun) -> Result<Vec<GaussianBelief>> {
    let t = run.filtered.len();
    if t == 0 {
        return Ok(Vec::new());
    }
    let mut out = vec![run.filtered[t - 1].clone(); t];
    for k in (0..t - 1).rev() {
        let f = &run.filtered[k];
        let p_next = &run.predicted[k + 1];
        let chol = cholesky_jitter(&p_next.cov, "RTS predicted covariance")?;
        let gain = chol.solve(&(&ssm.m * &f.cov)).transpose();
        let mean = &f.mean + &gain * (&out[k + 1].mean - &p_next.mean);
        let cov = &f.cov + &gain * (&out[k + 1].cov - &p_next.cov) * gain.transpose();
        out[k] = GaussianBelief {
            mean,
            cov: symmetrize(&cov),
        };
    }
    Ok(out)
}

/// Gaussian backward kernel `p(u_t | u_{t+1}, y_{1:t}) = N(mean + G (u_{t+1} - pred_mean), S)`.
#[derive(Debug, Clone)]
pub struct BackwardKernel {
    pub gain: DMatrix<f64>,
    pub cov: DMatrix<f64>,
    pub filtered_mean: DVector<f64>,
    pub predicted_mean: DVector<f64>,
}

impl BackwardKernel {
    pub fn mean(&self, u_next: &DVector<f64>) -> DVector<f64> {
        &self.filtered_mean + &self.gain * (u_next - &self.predicted_mean)
    }

    /// One draw per row of `u_next`.
    pub fn sample_rows(&self, u_next: ArrayView2<f64>, rng: &mut impl Rng) -> Array2<f64> {
        let factor = psd_factor(&self.cov);
        let d = self.filtered_mean.len();
        let mut out = Array2::zeros((u_next.nrows(), d));
        let mut z = DVector::zeros(d);
        for (i, row) in u_next.rows().into_iter().enumerate() {
            let next = DVector::from_iterator(d, row.iter().copied());
            for zi in z.iter_mut() {
                *zi = StandardNormal.sample(rng);
            }
            let x = self.mean(&next) + &factor * &z;
            out.row_mut(i).iter_mut().zip(x.iter()).for_each(|(o, v)| *o = *v);
        }
        out
    }
}

/// RTS backward kernel from the filtering belief at time `t`.
pub fn rts_backward_kernel(filtered: &GaussianBelief, ssm: &LinearSsm) -> Result<BackwardKernel> {
    let pred = kalman_predict(filtered, ssm);
    let chol =
        Cholesky::new(pred.cov.clone()).ok_or_else(|| Error::Singular("RTS predicted covariance P_{t+1|t}".into()))?;
    // G = P Mᵀ P_pred⁻¹ = (P_pred⁻¹ M P)ᵀ
    let gain = chol.solve(&(&ssm.m * &filtered.cov)).transpose();
    let n = filtered.dim();
    let cov = (DMatrix::identity(n, n) - &gain * &ssm.m) * &filtered.cov;
    Ok(BackwardKernel {
        gain,
        cov: symmetrize(&cov),
        filtered_mean: filtered.mean.clone(),
        predicted_mean: pred.mean,
    })
}

/// `p(u_k | u_{k-1}, y_k)`.
pub fn one_step_posterior(u_prev: &DVector<f64>, y: &DVector<f64>, ssm: &LinearSsm) -> Result<GaussianBelief> {
    if u_prev.len() != ssm.state_dim() || y.len() != ssm.obs_dim() {
        return Err(shape_err(
            "one_step_posterior",
            format!("u {} / y {}", ssm.state_dim(), ssm.obs_dim()),
            format!("u {} / y {}", u_prev.len(), y.len()),
        ));
    }
    let (gain, cov) = one_step_gain(ssm)?;
    let pred = &ssm.m * u_prev;
    let mean = &pred + &gain * (y - &ssm.h * &pred);
    Ok(GaussianBelief { mean, cov })
}

/// `(K̄, (I - K̄H) Q)` with `K̄ = Q Hᵀ (H Q Hᵀ + R)⁻¹`.
pub fn one_step_gain(ssm: &LinearSsm) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    let s = &ssm.h * &ssm.q * ssm.h.transpose() + &ssm.r;
    let chol = cholesky_jitter(&s, "single-step innovation covariance")?;
    let gain = chol.solve(&(&ssm.h * &ssm.q)).transpose();
    let n = ssm.state_dim();
    let cov = (DMatrix::identity(n, n) - &gain * &ssm.h) * &ssm.q;
    Ok((gain, symmetrize(&cov)))
}

/// `log N(y_next; H M u_t, H Q Hᵀ + R)`.
pub fn predictive_log_density(u_t: &DVector<f64>, y_next: &DVector<f64>, ssm: &LinearSsm) -> Result<f64> {
    let mean = &ssm.h * &ssm.m * u_t;
    let cov = &ssm.h * &ssm.q * ssm.h.transpose() + &ssm.r;
    gaussian_log_density(y_next, &mean, &cov)
}

pub fn gaussian_log_density(x: &DVector<f64>, mean: &DVector<f64>, cov: &DMatrix<f64>) -> Result<f64> {
    if x.len() != mean.len() || cov.shape() != (x.len(), x.len()) {
        return Err(shape_err("gaussian_log_density", mean.len(), x.len()));
    }
    let chol = cholesky_jitter(cov, "Gaussian covariance")?;
    let diff = x - mean;
    let quad = diff.dot(&chol.solve(&diff));
    let d = x.len() as f64;
    Ok(-0.5 * (d * (2.0 * std::f64::consts::PI).ln() + chol_logdet(&chol) + quad))
}

/// Closed-form `KL(p || q)` between Gaussians.
pub fn kl_gaussian(p: &GaussianBelief, q: &GaussianBelief) -> Result<f64> {
    if p.dim() != q.dim() {
        return Err(shape_err("kl_gaussian", p.dim(), q.dim()));
    }
    let cq = cholesky_jitter(&q.cov, "KL reference covariance")?;
    let cp = cholesky_jitter(&p.cov, "KL covariance")?;
    let trace = cq.solve(&p.cov).trace();
    let diff = &q.mean - &p.mean;
    let quad = diff.dot(&cq.solve(&diff));
    let kl = 0.5 * (trace + quad - p.dim() as f64 + chol_logdet(&cq) - chol_logdet(&cp));
    Ok(kl.max(0.0))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KlEstimate {
    pub value: f64,
    pub std_error: f64,
    pub samples: usize,
}

/// Monte Carlo `E_{u~p}[log p(u) - log q(u)]` for a Gaussian `p` and a
/// row-wise log-density `log_q`.
pub fn kl_gaussian_vs_density(
    belief: &GaussianBelief,
    mut log_q: impl FnMut(ArrayView2<f64>) -> Result<Array1<f64>>,
    n_mc: usize,
    rng: &mut impl Rng,
) -> Result<KlEstimate> {
    if n_mc < 2 {
        return Err(Error::Config("KL estimation needs at least 2 samples".into()));
    }
    let u = belief.sample(n_mc, rng);
    let lp = belief.log_density_rows(u.view())?;
    let lq = log_q(u.view())?;
    if lq.len() != n_mc {
        return Err(shape_err("kl_gaussian_vs_density", n_mc, lq.len()));
    }
    if !lq.iter().all(|v| v.is_finite()) {
        return Err(Error::NonFinite {
            op: "approximate log-density in KL estimate".into(),
        });
    }
    let diff = &lp - &lq;
    let n = n_mc as f64;
    let mean = diff.sum() / n;
    let var = diff.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / (n - 1.0);
    Ok(KlEstimate {
        value: mean,
        std_error: (var / n).sqrt(),
        samples: n_mc,
    })
}

/// Row-major `ndarray` view of a nalgebra vector list.
pub fn dvectors_to_rows(v: &[DVector<f64>]) -> Array2<f64> {
    let d = v.first().map_or(0, |x| x.len());
    Array2::from_shape_fn((v.len(), d), |(i, j)| v[i][j])
}

pub fn rows_to_dvectors(a: ArrayView2<f64>) -> Vec<DVector<f64>> {
    a.rows()
        .into_iter()
        .map(|r| DVector::from_iterator(r.len(), r.iter().copied()))
        .collect()
}
