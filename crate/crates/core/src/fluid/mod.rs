//! The amortized filter/smoother: a recurrent summary encoder, a forward
//! flow for `p(u_t | s_t)` and a backward flow for `p(u_t | u_{t+1}, s_t)`.
//!
//! Flows work in standardized state units and the encoder reads
//! standardized observations. Everything returned to callers is in
//! physical units.

pub mod infer;
pub mod train;

use std::path::Path;

use ndarray::{s, Array1, Array2, ArrayView2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::encoder::{EncoderConfig, EncoderModel};
use crate::error::{shape_err, Error, Result};
use crate::flows::{FlowConfig, FlowModel};
use crate::grad::{Loss, ParamId, ParamStore, Tape, Var};
use crate::model_io;
use crate::ssm::{Standardization, Trajectories};

pub use infer::{filter_samples, smooth_paths, smoothing_marginal, FilterResult, SmoothingPaths};
pub use train::{train, EpochLog, TrainConfig, TrainReport};

pub const MODEL_KIND: &str = "fluid";

/// Architecture knobs. Dimensions are filled in from the data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ArchConfig {
    pub hidden_dim: usize,
    pub layers: usize,
    /// Summary size; `3·d_y` when absent.
    pub summary_dim: Option<usize>,
    pub flow: FlowConfig,
    /// When false the backward flow gets its own encoder.
    pub shared_summary: bool,
}

impl Default for ArchConfig {
    fn default() -> Self {
        ArchConfig {
            hidden_dim: 128,
            layers: 4,
            summary_dim: None,
            flow: FlowConfig::default(),
            shared_summary: true,
        }
    }
}

#[derive(Serialize, Deserialize)]
struct Header {
    state_dim: usize,
    obs_dim: usize,
    #[serde(default)]
    trained_epochs: usize,
    arch: ArchConfig,
}

#[derive(Debug, Clone)]
pub struct FluidModel {
    pub arch: ArchConfig,
    pub state_dim: usize,
    pub obs_dim: usize,
    pub params: ParamStore,
    pub encoder: EncoderModel,
    pub encoder_bwd: Option<EncoderModel>,
    pub forward: FlowModel,
    pub backward: FlowModel,
    /// Completed training epochs.
    pub trained_epochs: usize,
    std_ids: [ParamId; 4],
}

fn row(a: &Array1<f64>) -> Array2<f64> {
    a.clone().insert_axis(ndarray::Axis(0))
}

impl FluidModel {
    pub fn new(
        arch: &ArchConfig,
        state_dim: usize,
        obs_dim: usize,
        stats: &Standardization,
        seed: u64,
    ) -> Result<Self> {
        if stats.u_mean.len() != state_dim || stats.y_mean.len() != obs_dim {
            return Err(shape_err(
                "FluidModel::new",
                format!("stats for d_u={state_dim}, d_y={obs_dim}"),
                format!("d_u={}, d_y={}", stats.u_mean.len(), stats.y_mean.len()),
            ));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let summary_dim = arch.summary_dim.unwrap_or(3 * obs_dim);
        let enc_cfg = EncoderConfig {
            obs_dim,
            hidden_dim: arch.hidden_dim,
            layers: arch.layers,
            summary_dim,
        };
        let encoder = EncoderModel::new(&mut params, "enc", enc_cfg.clone(), &mut rng)?;
        let forward = FlowModel::new(
            &mut params,
            "fwd",
            FlowConfig {
                data_dim: state_dim,
                cond_dim: summary_dim,
                ..arch.flow.clone()
            },
            &mut rng,
        )?;
        let backward = FlowModel::new(
            &mut params,
            "bwd",
            FlowConfig {
                data_dim: state_dim,
                cond_dim: state_dim + summary_dim,
                ..arch.flow.clone()
            },
            &mut rng,
        )?;
        let encoder_bwd = if arch.shared_summary {
            None
        } else {
            Some(EncoderModel::new(&mut params, "enc_bwd", enc_cfg, &mut rng)?)
        };
        let std_ids = [
            params.add("std.u_mean", row(&stats.u_mean), false),
            params.add("std.u_std", row(&stats.u_std), false),
            params.add("std.y_mean", row(&stats.y_mean), false),
            params.add("std.y_std", row(&stats.y_std), false),
        ];
        let mut arch = arch.clone();
        arch.summary_dim = Some(summary_dim);
        Ok(FluidModel {
            arch,
            state_dim,
            obs_dim,
            params,
            encoder,
            encoder_bwd,
            forward,
            backward,
            trained_epochs: 0,
            std_ids,
        })
    }

    pub fn summary_dim(&self) -> usize {
        self.encoder.config().summary_dim
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

    fn backward_encoder(&self) -> &EncoderModel {
        self.encoder_bwd.as_ref().unwrap_or(&self.encoder)
    }

    fn check_obs(&self, ys: &ArrayView2<f64>) -> Result<()> {
        if ys.ncols() != self.obs_dim {
            return Err(shape_err(
                "FluidModel",
                format!("{} observation columns", self.obs_dim),
                ys.ncols(),
            ));
        }
        Ok(())
    }

    /// Forward-encoder summaries `s_1..s_T` of a physical observation path.
    pub fn summaries(&self, ys: ArrayView2<f64>) -> Result<Array2<f64>> {
        self.check_obs(&ys)?;
        let z = self.stats().normalize_y(ys);
        self.encoder.encode_sequence(&self.params, z.view())
    }

    /// Summaries used by the backward flow; equal to [`Self::summaries`] when
    /// the summary is shared.
    pub fn summaries_bwd(&self, ys: ArrayView2<f64>) -> Result<Array2<f64>> {
        self.check_obs(&ys)?;
        let z = self.stats().normalize_y(ys);
        self.backward_encoder().encode_sequence(&self.params, z.view())
    }

    fn header(&self) -> String {
        toml::to_string(&Header {
            state_dim: self.state_dim,
            obs_dim: self.obs_dim,
            trained_epochs: self.trained_epochs,
            arch: self.arch.clone(),
        })
        .expect("model header serializes")
    }

    pub fn to_bytes(&self, with_optimizer: bool) -> Vec<u8> {
        model_io::encode(MODEL_KIND, &self.header(), &self.params, with_optimizer)
    }

    pub fn from_container(c: &model_io::Container) -> Result<Self> {
        let h: Header = model_io::parse_header(c, MODEL_KIND)?;
        let stats = Standardization::identity(h.state_dim, h.obs_dim);
        let mut model = FluidModel::new(&h.arch, h.state_dim, h.obs_dim, &stats, 0)?;
        model.params.copy_from(&c.store, c.has_optimizer)?;
        model.trained_epochs = h.trained_epochs;
        for (dst, src) in model.params.blocks().iter().zip(c.store.blocks()) {
            if dst.trainable != src.trainable {
                return Err(Error::Format(format!("block `{}` trainability differs", dst.name)));
            }
        }
        Ok(model)
    }

    pub fn save(&self, path: &Path, with_optimizer: bool) -> Result<()> {
        std::fs::write(path, self.to_bytes(with_optimizer))?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_container(&model_io::read(path)?)
    }
}

/// Inputs for one loss evaluation, laid out step-major: rows
/// `t·N_b .. (t+1)·N_b` hold step `t` of every trajectory.
fn step_inputs(tape: &mut Tape, a: &ndarray::Array3<f64>, mean: &Array1<f64>, std: &Array1<f64>) -> Vec<Var> {
    (0..a.dim().1)
        .map(|t| {
            let x = (&a.slice(s![.., t, ..]) - mean) / std;
            tape.input(x)
        })
        .collect()
}

/// Weighted negative log-likelihood of a batch, in standardized units:
///
/// ```text
/// L = -1/(N_b T) ΣΣ_t log p_fwd(u_t | s_t)
///     - λ/(N_b (T-1)) ΣΣ_{t<T} log p_bwd(u_t | u_{t+1}, s_t)
/// ```
///
/// The loss terms are reported as `filter_nll` and `backward_nll` (each
/// already averaged).
pub fn joint_loss(
    model: &FluidModel,
    tape: &mut Tape,
    batch: &Trajectories,
    lambda: f64,
    truncate: Option<usize>,
) -> Result<Loss> {
    let (nb, t, du) = batch.states.dim();
    if t < 2 {
        return Err(Error::Config(format!("joint loss needs T >= 2, got {t}")));
    }
    if nb == 0 {
        return Err(Error::Empty("loss batch".into()));
    }
    if du != model.state_dim || batch.obs_dim() != model.obs_dim {
        return Err(shape_err(
            "joint_loss",
            format!("d_u={}, d_y={}", model.state_dim, model.obs_dim),
            format!("d_u={du}, d_y={}", batch.obs_dim()),
        ));
    }
    if !(lambda >= 0.0) {
        return Err(Error::Config(format!("lambda must be >= 0, got {lambda}")));
    }
    let st = model.stats();
    let ys = step_inputs(tape, &batch.obs, &st.y_mean, &st.y_std);
    let us = step_inputs(tape, &batch.states, &st.u_mean, &st.u_std);
    let store = &model.params;

    let s_fwd = model.encoder.encode_tape(tape, store, &ys, truncate);
    let s_bwd = match &model.encoder_bwd {
        Some(enc) => enc.encode_tape(tape, store, &ys, truncate),
        None => s_fwd.clone(),
    };

    let u_all = tape.concat_rows(&us);
    let c_all = tape.concat_rows(&s_fwd);
    let lp_f = model.forward.log_prob_tape(tape, store, u_all, Some(c_all));
    let sum_f = tape.sum_all(lp_f);
    let filter = tape.scale(sum_f, -1.0 / (nb * t) as f64);

    let u_prev = tape.concat_rows(&us[..t - 1]);
    let u_next = tape.concat_rows(&us[1..]);
    let s_prev = tape.concat_rows(&s_bwd[..t - 1]);
    let cond = tape.concat_cols(&[u_next, s_prev]);
    let lp_b = model.backward.log_prob_tape(tape, store, u_prev, Some(cond));
    let sum_b = tape.sum_all(lp_b);
    let back = tape.scale(sum_b, -1.0 / (nb * (t - 1)) as f64);

    let weighted = tape.scale(back, lambda);
    let total = tape.add(filter, weighted);
    tape.check_finite()?;
    Ok(Loss {
        var: total,
        value: tape.scalar(total),
        terms: vec![("filter_nll", tape.scalar(filter)), ("backward_nll", tape.scalar(back))],
    })
}

/// Default weighting `(T-1)/T`.
pub fn default_lambda(t: usize) -> f64 {
    (t.saturating_sub(1)) as f64 / t.max(1) as f64
}
