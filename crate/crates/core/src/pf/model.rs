//! Learned particle-filter factors: `θ3` for `p(y_k | u_{k-1})`, `θ4` for
//! `p(u_k | y_k, u_{k-1})`, and optionally `θ5`/`θ6` for the bootstrap
//! factorization.

use std::path::Path;

use ndarray::{concatenate, s, Array1, Array2, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::factors::{check_rows, AdaptedFactors, BootstrapFactors};
use crate::error::{shape_err, Error, Result};
use crate::flows::FlowConfig;
use crate::flows::FlowModel;
use crate::fluid::train::split_indices;
use crate::grad::{adam_step, backprop, clip_grad_norm, AdamConfig, Loss, ParamId, ParamStore, Tape, Var};
use crate::model_io;
use crate::ssm::{Standardization, Trajectories};

pub const MODEL_KIND: &str = "pf";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PfTrainConfig {
    pub flow: FlowConfig,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub lr_decay: f64,
    pub grad_clip: Option<f64>,
    pub seed: u64,
    pub val_fraction: f64,
    /// Also fit the bootstrap pair.
    pub bootstrap: bool,
}

impl Default for PfTrainConfig {
    fn default() -> Self {
        PfTrainConfig {
            flow: FlowConfig::default(),
            epochs: 100,
            batch_size: 256,
            lr: 1e-3,
            lr_decay: 1.0,
            grad_clip: Some(10.0),
            seed: 0,
            val_fraction: 0.1,
            bootstrap: false,
        }
    }
}

/// Transition triples `(u_{k-1}, u_k, y_k)` pooled over steps and paths.
#[derive(Debug, Clone)]
pub struct Triples {
    pub u_prev: Array2<f64>,
    pub u: Array2<f64>,
    pub y: Array2<f64>,
}

impl Triples {
    /// Uses steps `2..=T` of every path; the initial state is not stored.
    pub fn from_trajectories(tr: &Trajectories) -> Self {
        let (n, t, du) = tr.states.dim();
        let dy = tr.obs_dim();
        let m = n * t.saturating_sub(1);
        let mut u_prev = Array2::zeros((m, du));
        let mut u = Array2::zeros((m, du));
        let mut y = Array2::zeros((m, dy));
        let mut r = 0;
        for i in 0..n {
            for k in 1..t {
                u_prev.row_mut(r).assign(&tr.states.slice(s![i, k - 1, ..]));
                u.row_mut(r).assign(&tr.states.slice(s![i, k, ..]));
                y.row_mut(r).assign(&tr.obs.slice(s![i, k, ..]));
                r += 1;
            }
        }
        Triples { u_prev, u, y }
    }

    pub fn len(&self) -> usize {
        self.u.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn select(&self, idx: &[usize]) -> Triples {
        Triples {
            u_prev: self.u_prev.select(Axis(0), idx),
            u: self.u.select(Axis(0), idx),
            y: self.y.select(Axis(0), idx),
        }
    }
}

#[derive(Serialize, Deserialize)]
struct Header {
    state_dim: usize,
    obs_dim: usize,
    bootstrap: bool,
    flow: FlowConfig,
}

#[derive(Debug, Clone)]
pub struct PfModel {
    pub state_dim: usize,
    pub obs_dim: usize,
    pub params: ParamStore,
    /// `θ3`: data `y`, condition `u_{k-1}`.
    pub predictive: FlowModel,
    /// `θ4`: data `u`, condition `[y_k, u_{k-1}]`.
    pub proposal: FlowModel,
    /// `θ5`: data `u`, condition `u_{k-1}`.
    pub transition: Option<FlowModel>,
    /// `θ6`: data `y`, condition `u_k`.
    pub likelihood: Option<FlowModel>,
    flow: FlowConfig,
    std_ids: [ParamId; 4],
}

fn row(a: &Array1<f64>) -> Array2<f64> {
    a.clone().insert_axis(Axis(0))
}

impl PfModel {
    pub fn new(flow: &FlowConfig, stats: &Standardization, bootstrap: bool, seed: u64) -> Result<Self> {
        let (du, dy) = (stats.u_mean.len(), stats.y_mean.len());
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let cfg = |data_dim, cond_dim| FlowConfig {
            data_dim,
            cond_dim,
            ..flow.clone()
        };
        let predictive = FlowModel::new(&mut params, "pred", cfg(dy, du), &mut rng)?;
        let proposal = FlowModel::new(&mut params, "prop", cfg(du, dy + du), &mut rng)?;
        let (transition, likelihood) = if bootstrap {
            (
                Some(FlowModel::new(&mut params, "trans", cfg(du, du), &mut rng)?),
                Some(FlowModel::new(&mut params, "lik", cfg(dy, du), &mut rng)?),
            )
        } else {
            (None, None)
        };
        let std_ids = [
            params.add("std.u_mean", row(&stats.u_mean), false),
            params.add("std.u_std", row(&stats.u_std), false),
            params.add("std.y_mean", row(&stats.y_mean), false),
            params.add("std.y_std", row(&stats.y_std), false),
        ];
        Ok(PfModel {
            state_dim: du,
            obs_dim: dy,
            params,
            predictive,
            proposal,
            transition,
            likelihood,
            flow: flow.clone(),
            std_ids,
        })
    }

    pub fn has_bootstrap(&self) -> bool {
        self.transition.is_some()
    }

    pub fn stats(&self) -> Standardization {
        let get = |i: usize| self.params.value(self.std_ids[i]).row(0).to_owned();
        Standardization {
            u_mean: get(0),
            u_std: get(1),
            y_mean: get(2),
            y_std: get(3),
        }
    }

    fn y_log_scale(&self) -> f64 {
        self.stats().y_std.iter().map(|s| s.ln()).sum()
    }

    fn bootstrap_flows(&self) -> Result<(&FlowModel, &FlowModel)> {
        match (&self.transition, &self.likelihood) {
            (Some(t), Some(l)) => Ok((t, l)),
            _ => Err(Error::Config("model was trained without the bootstrap pair".into())),
        }
    }

    fn header(&self) -> String {
        toml::to_string(&Header {
            state_dim: self.state_dim,
            obs_dim: self.obs_dim,
            bootstrap: self.has_bootstrap(),
            flow: self.flow.clone(),
        })
        .expect("pf header serializes")
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        model_io::encode(MODEL_KIND, &self.header(), &self.params, false)
    }

    pub fn from_container(c: &model_io::Container) -> Result<Self> {
        let h: Header = model_io::parse_header(c, MODEL_KIND)?;
        let stats = Standardization::identity(h.state_dim, h.obs_dim);
        let mut model = PfModel::new(&h.flow, &stats, h.bootstrap, 0)?;
        model.params.copy_from(&c.store, false)?;
        Ok(model)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_container(&model_io::read(path)?)
    }

    /// `[y, u_prev]` in standardized units with `n` rows.
    fn proposal_cond(&self, y: &ArrayView2<f64>, u_prev: &ArrayView2<f64>, n: usize) -> Array2<f64> {
        let st = self.stats();
        let yz = st.normalize_y(*y);
        let yz = yz.broadcast((n, self.obs_dim)).expect("checked rows").to_owned();
        let uz = st.normalize_u(*u_prev);
        let uz = uz.broadcast((n, self.state_dim)).expect("checked rows").to_owned();
        concatenate![Axis(1), yz, uz]
    }
}

impl AdaptedFactors for PfModel {
    fn state_dim(&self) -> usize {
        self.state_dim
    }

    fn obs_dim(&self) -> usize {
        self.obs_dim
    }

    fn predictive_log_density(&self, y: ArrayView2<f64>, u_prev: ArrayView2<f64>) -> Result<Array1<f64>> {
        let n = u_prev.nrows();
        check_rows("predictive_log_density", &y, n, self.obs_dim)?;
        let st = self.stats();
        let yz = st.normalize_y(y);
        let yz = yz.broadcast((n, self.obs_dim)).expect("checked rows");
        let lp = self
            .predictive
            .log_prob(&self.params, yz, st.normalize_u(u_prev).view())?;
        Ok(lp - self.y_log_scale())
    }

    fn sample_predictive<R: Rng>(&self, u_prev: ArrayView2<f64>, rng: &mut R) -> Result<Array2<f64>> {
        let st = self.stats();
        let z = self
            .predictive
            .sample(&self.params, st.normalize_u(u_prev).view(), u_prev.nrows(), rng)?;
        Ok(&z * &st.y_std + &st.y_mean)
    }

    fn proposal_log_density(
        &self,
        u: ArrayView2<f64>,
        y: ArrayView2<f64>,
        u_prev: ArrayView2<f64>,
    ) -> Result<Array1<f64>> {
        let n = u.nrows();
        check_rows("proposal_log_density", &y, n, self.obs_dim)?;
        check_rows("proposal_log_density", &u_prev, n, self.state_dim)?;
        let st = self.stats();
        let cond = self.proposal_cond(&y, &u_prev, n);
        let lp = self
            .proposal
            .log_prob(&self.params, st.normalize_u(u).view(), cond.view())?;
        Ok(lp - st.u_log_scale())
    }

    fn sample_proposal<R: Rng>(&self, y: ArrayView2<f64>, u_prev: ArrayView2<f64>, rng: &mut R) -> Result<Array2<f64>> {
        let n = u_prev.nrows();
        check_rows("sample_proposal", &y, n, self.obs_dim)?;
        let cond = self.proposal_cond(&y, &u_prev, n);
        let z = self.proposal.sample(&self.params, cond.view(), n, rng)?;
        Ok(self.stats().denormalize_u(z.view()))
    }
}

impl BootstrapFactors for PfModel {
    fn sample_transition<R: Rng>(&self, u_prev: ArrayView2<f64>, rng: &mut R) -> Result<Array2<f64>> {
        let (trans, _) = self.bootstrap_flows()?;
        let st = self.stats();
        let z = trans.sample(&self.params, st.normalize_u(u_prev).view(), u_prev.nrows(), rng)?;
        Ok(st.denormalize_u(z.view()))
    }

    fn likelihood_log_density(&self, y: ArrayView2<f64>, u: ArrayView2<f64>) -> Result<Array1<f64>> {
        let (_, lik) = self.bootstrap_flows()?;
        let n = u.nrows();
        check_rows("likelihood_log_density", &y, n, self.obs_dim)?;
        let st = self.stats();
        let yz = st.normalize_y(y);
        let yz = yz.broadcast((n, self.obs_dim)).expect("checked rows");
        let lp = lik.log_prob(&self.params, yz, st.normalize_u(u).view())?;
        Ok(lp - self.y_log_scale())
    }
}

/// Sum of per-factor mean NLLs in standardized units; terms are `θ3, θ4`
/// and, with the bootstrap pair, `θ5, θ6`.
pub fn pf_loss(model: &PfModel, tape: &mut Tape, batch: &Triples) -> Result<Loss> {
    let n = batch.len();
    if n == 0 {
        return Err(Error::Empty("transition triples".into()));
    }
    if batch.u.ncols() != model.state_dim || batch.y.ncols() != model.obs_dim {
        return Err(shape_err(
            "pf_loss",
            format!("d_u={}, d_y={}", model.state_dim, model.obs_dim),
            format!("d_u={}, d_y={}", batch.u.ncols(), batch.y.ncols()),
        ));
    }
    let st = model.stats();
    let up = tape.input(st.normalize_u(batch.u_prev.view()));
    let u = tape.input(st.normalize_u(batch.u.view()));
    let y = tape.input(st.normalize_y(batch.y.view()));
    let store = &model.params;
    let nll = |tape: &mut Tape, flow: &FlowModel, x: Var, c: Var| {
        let lp = flow.log_prob_tape(tape, store, x, Some(c));
        let s = tape.sum_all(lp);
        tape.scale(s, -1.0 / n as f64)
    };
    let yu = tape.concat_cols(&[y, up]);
    let mut terms = vec![nll(tape, &model.predictive, y, up), nll(tape, &model.proposal, u, yu)];
    if let (Some(tr), Some(lk)) = (&model.transition, &model.likelihood) {
        terms.push(nll(tape, tr, u, up));
        terms.push(nll(tape, lk, y, u));
    }
    let mut total = terms[0];
    for &t in &terms[1..] {
        total = tape.add(total, t);
    }
    tape.check_finite()?;
    const NAMES: [&str; 4] = ["predictive_nll", "proposal_nll", "transition_nll", "likelihood_nll"];
    Ok(Loss {
        var: total,
        value: tape.scalar(total),
        terms: NAMES.iter().zip(&terms).map(|(&n, &t)| (n, tape.scalar(t))).collect(),
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct PfEpochLog {
    pub epoch: usize,
    pub train_nll: f64,
    /// Per-factor validation NLL, same order as [`pf_loss`].
    pub val_terms: Vec<f64>,
}

/// Fits the factor flows on pooled triples. The factors have disjoint
/// parameters, so minimizing the sum with per-coordinate Adam is the same
/// as fitting each objective separately.
pub fn train_pf_flows(
    triples: &Triples,
    stats: &Standardization,
    cfg: &PfTrainConfig,
) -> Result<(PfModel, Vec<PfEpochLog>)> {
    if triples.is_empty() {
        return Err(Error::Empty("transition triples".into()));
    }
    if cfg.batch_size == 0 || !(cfg.lr > 0.0) || !(cfg.lr_decay > 0.0) || !(0.0..1.0).contains(&cfg.val_fraction) {
        return Err(Error::Config("invalid particle-filter training configuration".into()));
    }
    let mut model = PfModel::new(&cfg.flow, stats, cfg.bootstrap, cfg.seed)?;
    let (train_idx, val_idx) = split_indices(triples.len(), cfg.val_fraction, cfg.seed);
    let train_set = triples.select(&train_idx);
    let val_set = triples.select(&val_idx);
    let bs = cfg.batch_size.min(train_set.len());
    let mut curve = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let step = AdamConfig {
            lr: cfg.lr * cfg.lr_decay.powi(epoch as i32),
            ..AdamConfig::default()
        };
        let mut order: Vec<usize> = (0..train_set.len()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(epoch as u64);
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for chunk in order.chunks(bs) {
            let mut tape = Tape::new();
            let diverged = |_| Error::Diverged {
                epoch: epoch + 1,
                last_good: None,
            };
            let loss = pf_loss(&model, &mut tape, &train_set.select(chunk)).map_err(diverged)?;
            backprop(&tape, &loss, &mut model.params).map_err(diverged)?;
            if let Some(c) = cfg.grad_clip {
                clip_grad_norm(&mut model.params, c)?;
            }
            adam_step(&mut model.params, &step)?;
            total += loss.value * chunk.len() as f64;
        }
        let val_terms = if val_set.is_empty() {
            Vec::new()
        } else {
            evaluate_pf_loss(&model, &val_set, bs)?
        };
        curve.push(PfEpochLog {
            epoch: epoch + 1,
            train_nll: total / train_set.len() as f64,
            val_terms,
        });
    }
    Ok((model, curve))
}

/// Mean per-factor NLL over a set, in standardized units.
pub fn evaluate_pf_loss(model: &PfModel, set: &Triples, chunk: usize) -> Result<Vec<f64>> {
    let idx: Vec<usize> = (0..set.len()).collect();
    let mut acc: Vec<f64> = Vec::new();
    for c in idx.chunks(chunk.max(1)) {
        let mut tape = Tape::inference();
        let terms: Vec<f64> = pf_loss(model, &mut tape, &set.select(c))?
            .terms
            .iter()
            .map(|t| t.1)
            .collect();
        acc.resize(terms.len(), 0.0);
        for (a, t) in acc.iter_mut().zip(terms) {
            *a += t * c.len() as f64 / set.len() as f64;
        }
    }
    Ok(acc)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::flows::tests::randomize;
    use crate::ssm::{ModelSpec, SvSpec};

    fn small_flow() -> FlowConfig {
        FlowConfig {
            num_coupling: 2,
            rff_features: 4,
            mlp_depth: 1,
            mlp_width: 8,
            scale_bias_hidden: 8,
            ..FlowConfig::default()
        }
    }

    fn data() -> Trajectories {
        ModelSpec::Sv(SvSpec::default())
            .simulate(6, 4, &mut ChaCha8Rng::seed_from_u64(0))
            .unwrap()
    }

    #[test]
    fn triples_skip_the_first_step() {
        let tr = data();
        let tp = Triples::from_trajectories(&tr);
        assert_eq!(tp.len(), 4 * 5);
        assert_eq!(tp.u_prev.row(0), tr.states.slice(s![0, 0, ..]));
        assert_eq!(tp.u.row(0), tr.states.slice(s![0, 1, ..]));
        assert_eq!(tp.y.row(4), tr.obs.slice(s![0, 5, ..]));
    }

    #[test]
    fn empty_triples_rejected() {
        let tr = data().truncate(1);
        let tp = Triples::from_trajectories(&tr);
        let st = Standardization::identity(2, 2);
        assert!(matches!(
            train_pf_flows(&tp, &st, &PfTrainConfig::default()),
            Err(Error::Empty(_))
        ));
    }

    #[test]
    fn physical_density_accounts_for_scaling() {
        let tr = data();
        let st = Standardization::fit(&tr).unwrap();
        let mut m = PfModel::new(&small_flow(), &st, true, 1).unwrap();
        randomize(&mut m.params, 0.2, 2);
        let tp = Triples::from_trajectories(&tr);
        let mut tape = Tape::inference();
        let terms: Vec<f64> = pf_loss(&m, &mut tape, &tp).unwrap().terms.iter().map(|t| t.1).collect();
        let lp = m.predictive_log_density(tp.y.view(), tp.u_prev.view()).unwrap();
        let ys: f64 = st.y_std.iter().map(|s| s.ln()).sum();
        assert!((-lp.mean().unwrap() - (terms[0] + ys)).abs() < 1e-10);
        let lq = m
            .proposal_log_density(tp.u.view(), tp.y.view(), tp.u_prev.view())
            .unwrap();
        assert!((-lq.mean().unwrap() - (terms[1] + st.u_log_scale())).abs() < 1e-10);
        assert_eq!(terms.len(), 4);
    }

    #[test]
    fn training_reduces_loss_and_round_trips() {
        let tr = ModelSpec::Sv(SvSpec::default())
            .simulate(20, 20, &mut ChaCha8Rng::seed_from_u64(3))
            .unwrap();
        let st = Standardization::fit(&tr).unwrap();
        let tp = Triples::from_trajectories(&tr);
        let cfg = PfTrainConfig {
            flow: small_flow(),
            epochs: 8,
            batch_size: 64,
            lr: 5e-3,
            ..PfTrainConfig::default()
        };
        let (m, curve) = train_pf_flows(&tp, &st, &cfg).unwrap();
        let init = PfModel::new(&cfg.flow, &st, false, cfg.seed).unwrap();
        let before: f64 = evaluate_pf_loss(&init, &tp, 128).unwrap().iter().sum();
        let after: f64 = evaluate_pf_loss(&m, &tp, 128).unwrap().iter().sum();
        assert!(after < before, "{after} !< {before}");
        assert_eq!(curve.len(), 8);
        let back = PfModel::from_container(&model_io::decode(&m.to_bytes()).unwrap()).unwrap();
        assert_eq!(back.params.flat_values(), m.params.flat_values());
        assert_eq!(back.stats(), st);
    }
}
