//! Periodic 1-D advection-diffusion `∂t u = a ∂x u + κ ∂xx u` on `[0, 1)`,
//! discretized with `n` points and observed every `Δt`.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gaussian::LinearSsm;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Scheme {
    Upwind,
    LaxWendroff,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "kebab-case")]
pub enum ProcessNoise {
    /// `Q = q I` at the observation step.
    Coarse { q: f64 },
    /// `Q_δt = scale · δt / n · I` injected at every fine step.
    Fine { scale: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "kebab-case")]
pub enum Observation {
    /// Indices `0, 2, …, n-2`.
    SubsampleEven,
    /// Averages over `groups` consecutive blocks of equal size.
    GroupAverage { groups: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdvDiffSpec {
    pub n: usize,
    pub a: f64,
    pub kappa: f64,
    pub dt_obs: f64,
    /// Fine step. When absent, the largest stable `Δt / 2^p` is used.
    #[serde(default)]
    pub dt_fine: Option<f64>,
    pub noise: ProcessNoise,
    /// Observation noise variance, `R = r I`.
    pub r: f64,
    /// Initial standard deviation, `Σ = σ² I`.
    pub sigma: f64,
    pub scheme: Scheme,
    pub observation: Observation,
}

impl AdvDiffSpec {
    /// Pure advection with upwinding, `Q = qI`, even-index observations.
    pub fn case1(n: usize) -> Self {
        AdvDiffSpec {
            n,
            a: -1.0,
            kappa: 0.0,
            dt_obs: 0.05,
            dt_fine: None,
            noise: ProcessNoise::Coarse { q: 0.01 },
            r: 0.1,
            sigma: 0.05,
            scheme: Scheme::Upwind,
            observation: Observation::SubsampleEven,
        }
    }

    /// Advection-diffusion with Lax-Wendroff, fine-step noise and 8 grouped
    /// observations.
    pub fn case2(n: usize) -> Self {
        AdvDiffSpec {
            n,
            a: 1.0,
            kappa: 0.01,
            dt_obs: 0.01,
            dt_fine: None,
            noise: ProcessNoise::Fine { scale: 1.0 },
            r: 0.01,
            sigma: 0.05 / n as f64,
            scheme: Scheme::LaxWendroff,
            observation: Observation::GroupAverage { groups: 8 },
        }
    }

    pub fn obs_dim(&self) -> usize {
        match self.observation {
            Observation::SubsampleEven => self.n.div_ceil(2),
            Observation::GroupAverage { groups } => groups,
        }
    }

    /// Stability measure of the fine scheme; the scheme is stable iff this
    /// is at most 1.
    pub fn stability_number(&self, dt: f64) -> f64 {
        let dx = 1.0 / self.n as f64;
        let c = self.a.abs() * dt / dx;
        let d = self.kappa * dt / (dx * dx);
        match self.scheme {
            Scheme::Upwind => c + 2.0 * d,
            Scheme::LaxWendroff => c * c + 2.0 * d,
        }
    }

    /// Fine step and number of fine steps per observation interval.
    pub fn fine_step(&self) -> Result<(f64, usize)> {
        if let Some(dt) = self.dt_fine {
            let m = (self.dt_obs / dt).round();
            if !(m >= 1.0) || ((m * dt - self.dt_obs).abs() > 1e-9 * self.dt_obs) {
                return Err(Error::Config(format!(
                    "dt_fine = {dt} does not divide dt_obs = {}",
                    self.dt_obs
                )));
            }
            let s = self.stability_number(dt);
            if s > 1.0 + 1e-12 {
                return Err(Error::Config(format!(
                    "{:?} scheme unstable at dt_fine = {dt}: stability number {s:.4} > 1 (largest stable power-of-two step {:.6e})",
                    self.scheme,
                    self.largest_stable_step()
                )));
            }
            return Ok((dt, m as usize));
        }
        let dt = self.largest_stable_step();
        Ok((dt, (self.dt_obs / dt).round() as usize))
    }

    fn largest_stable_step(&self) -> f64 {
        let mut m = 1usize;
        while self.stability_number(self.dt_obs / m as f64) > 1.0 + 1e-12 && m < 1 << 30 {
            m *= 2;
        }
        self.dt_obs / m as f64
    }

    pub fn validate(&self) -> Result<()> {
        if self.n < 2 {
            return Err(Error::Config("advection-diffusion needs n >= 2".into()));
        }
        if !(self.dt_obs > 0.0) || self.kappa < 0.0 || !(self.r > 0.0) || self.sigma < 0.0 {
            return Err(Error::Config(
                "advection-diffusion needs dt_obs > 0, kappa >= 0, r > 0, sigma >= 0".into(),
            ));
        }
        match self.noise {
            ProcessNoise::Coarse { q } if q < 0.0 => return Err(Error::Config("q must be >= 0".into())),
            ProcessNoise::Fine { scale } if scale < 0.0 => {
                return Err(Error::Config("fine noise scale must be >= 0".into()))
            }
            _ => {}
        }
        if let Observation::GroupAverage { groups } = self.observation {
            if groups == 0 || !self.n.is_multiple_of(groups) {
                return Err(Error::Config(format!(
                    "{groups} groups do not partition n = {}",
                    self.n
                )));
            }
        }
        Ok(())
    }
}

/// One fine-step update matrix for the given fine step.
pub fn fine_matrix(spec: &AdvDiffSpec, dt: f64) -> DMatrix<f64> {
    let n = spec.n;
    let dx = 1.0 / n as f64;
    let d = spec.kappa * dt / (dx * dx);
    // velocity of transport is -a
    let v = -spec.a;
    let c = v * dt / dx;
    let mut m = DMatrix::identity(n, n);
    let left = |j: usize| (j + n - 1) % n;
    let right = |j: usize| (j + 1) % n;
    for j in 0..n {
        let (l, r) = (left(j), right(j));
        match spec.scheme {
            Scheme::Upwind => {
                if c >= 0.0 {
                    m[(j, j)] -= c;
                    m[(j, l)] += c;
                } else {
                    m[(j, j)] += c;
                    m[(j, r)] -= c;
                }
            }
            Scheme::LaxWendroff => {
                m[(j, r)] += -0.5 * c + 0.5 * c * c;
                m[(j, l)] += 0.5 * c + 0.5 * c * c;
                m[(j, j)] -= c * c;
            }
        }
        m[(j, r)] += d;
        m[(j, l)] += d;
        m[(j, j)] -= 2.0 * d;
    }
    m
}

/// Periodic backward difference `(A u)_j = u_j - u_{j-1}`.
pub fn backward_difference(n: usize) -> DMatrix<f64> {
    let mut a = DMatrix::identity(n, n);
    for j in 0..n {
        a[(j, (j + n - 1) % n)] -= 1.0;
    }
    a
}

pub fn observation_matrix(spec: &AdvDiffSpec) -> DMatrix<f64> {
    let n = spec.n;
    match spec.observation {
        Observation::SubsampleEven => {
            let ny = spec.obs_dim();
            DMatrix::from_fn(ny, n, |i, j| if j == 2 * i { 1.0 } else { 0.0 })
        }
        Observation::GroupAverage { groups } => {
            let size = n / groups;
            DMatrix::from_fn(groups, n, |i, j| if j / size == i { 1.0 / size as f64 } else { 0.0 })
        }
    }
}

/// Exact linear-Gaussian model `(M, H, Q, R, μ, Σ)` for the spec.
pub fn build_advdiff(spec: &AdvDiffSpec) -> Result<LinearSsm> {
    spec.validate()?;
    let (dt, steps) = spec.fine_step()?;
    let n = spec.n;
    let m_fine = fine_matrix(spec, dt);
    let mut m = DMatrix::identity(n, n);
    for _ in 0..steps {
        m = &m_fine * m;
    }
    let q = match spec.noise {
        ProcessNoise::Coarse { q } => DMatrix::identity(n, n) * q,
        ProcessNoise::Fine { scale } => {
            let q_fine = scale * dt / n as f64;
            let mut acc = DMatrix::zeros(n, n);
            let mut power = DMatrix::identity(n, n);
            for _ in 0..steps {
                acc += &power * power.transpose() * q_fine;
                power = &m_fine * power;
            }
            crate::gaussian::symmetrize(&acc)
        }
    };
    let h = observation_matrix(spec);
    let ny = h.nrows();
    let mu = DVector::from_fn(n, |j, _| (2.0 * std::f64::consts::PI * j as f64 / n as f64).sin());
    LinearSsm::new(
        m,
        h,
        q,
        DMatrix::identity(ny, ny) * spec.r,
        mu,
        DMatrix::identity(n, n) * (spec.sigma * spec.sigma),
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_courant_is_identity() {
        let mut spec = AdvDiffSpec::case1(4);
        spec.a = 0.0;
        let m = fine_matrix(&spec, 0.01);
        assert_eq!(m, DMatrix::identity(4, 4));
    }

    #[test]
    fn case1_defaults() {
        let spec = AdvDiffSpec::case1(10);
        let ssm = build_advdiff(&spec).unwrap();
        assert_eq!(spec.fine_step().unwrap(), (0.05, 1));
        // M = I - νA with ν = δt/Δx = 0.5
        let expected = DMatrix::identity(10, 10) - backward_difference(10) * 0.5;
        assert!((&ssm.m - expected).amax() < 1e-15);
        assert_eq!(ssm.q, DMatrix::identity(10, 10) * 0.01);
        assert_eq!(ssm.r, DMatrix::identity(5, 5) * 0.1);
        assert!((ssm.sigma0[(0, 0)] - 0.0025).abs() < 1e-15);
        assert_eq!(ssm.h[(2, 4)], 1.0);
        assert!((ssm.mu0[1] - (0.2 * std::f64::consts::PI).sin()).abs() < 1e-15);
    }

    #[test]
    fn conservative_rows() {
        for spec in [AdvDiffSpec::case1(10), AdvDiffSpec::case2(16), AdvDiffSpec::case2(64)] {
            let (dt, _) = spec.fine_step().unwrap();
            let m = fine_matrix(&spec, dt);
            for row in m.row_iter() {
                assert!((row.sum() - 1.0).abs() < 1e-12);
            }
            assert!(spec.stability_number(dt) <= 1.0);
        }
    }

    #[test]
    fn case2_noise_and_observation() {
        let spec = AdvDiffSpec::case2(16);
        let (dt, steps) = spec.fine_step().unwrap();
        assert!((dt * steps as f64 - 0.01).abs() < 1e-15);
        let ssm = build_advdiff(&spec).unwrap();
        assert_eq!(ssm.h.shape(), (8, 16));
        for row in ssm.h.row_iter() {
            assert!((row.sum() - 1.0).abs() < 1e-15);
        }
        // trace of Q: each fine injection is mapped through a conservative
        // but contracting operator, so trace(Q) ≤ Δt.
        assert!(ssm.q.trace() <= 0.01 + 1e-12);
        assert!(ssm.q.trace() > 0.0);
    }

    #[test]
    fn cfl_violation_reports_bound() {
        let mut spec = AdvDiffSpec::case1(10);
        spec.dt_obs = 0.2;
        spec.dt_fine = Some(0.2);
        let err = build_advdiff(&spec).unwrap_err();
        assert!(
            matches!(err, Error::Config(ref m) if m.contains("stability number")),
            "{err}"
        );
    }
}
