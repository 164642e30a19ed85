//! Stacked LSTM summary network. Each observation prefix `y_{1:t}` maps to a
//! fixed-size summary `s_t = W_s h_t^{(L)} + b_s`.
//!
//! Gate weights of a layer are stored stacked in `[i, f, o, g]` order:
//! `w_y` is `(input, 4·d_h)`, `w_h` is `(d_h, 4·d_h)` and `b` is `(1, 4·d_h)`.

use ndarray::{s, Array2, ArrayView2};
use rand::Rng;
use rand_distr::{Distribution, Uniform};
use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::grad::{Activation, ParamId, ParamStore, Tape, Var};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EncoderConfig {
    pub obs_dim: usize,
    pub hidden_dim: usize,
    pub layers: usize,
    pub summary_dim: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            obs_dim: 1,
            hidden_dim: 128,
            layers: 4,
            summary_dim: 3,
        }
    }
}

impl EncoderConfig {
    /// Defaults with `summary_dim = 3·obs_dim`.
    pub fn new(obs_dim: usize) -> Self {
        EncoderConfig {
            obs_dim,
            summary_dim: 3 * obs_dim,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.obs_dim == 0 || self.hidden_dim == 0 || self.layers == 0 || self.summary_dim == 0 {
            return Err(Error::Config(format!("encoder dimensions must be positive: {self:?}")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
struct LstmLayer {
    w_y: ParamId,
    w_h: ParamId,
    b: ParamId,
}

#[derive(Debug, Clone)]
pub struct EncoderModel {
    config: EncoderConfig,
    layers: Vec<LstmLayer>,
    head_w: ParamId,
    head_b: ParamId,
}

/// Per-layer hidden and cell states for a batch of sequences (one row each).
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderState {
    pub h: Vec<Array2<f64>>,
    pub c: Vec<Array2<f64>>,
}

impl EncoderState {
    pub fn zeros(config: &EncoderConfig, batch: usize) -> Self {
        let z = Array2::zeros((batch, config.hidden_dim));
        EncoderState {
            h: vec![z.clone(); config.layers],
            c: vec![z; config.layers],
        }
    }
}

/// Encoder state held on a tape.
#[derive(Debug, Clone)]
pub struct TapeState {
    pub h: Vec<Var>,
    pub c: Vec<Var>,
}

impl EncoderModel {
    pub fn new(store: &mut ParamStore, prefix: &str, config: EncoderConfig, rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        let h = config.hidden_dim;
        let bound = 1.0 / (h as f64).sqrt();
        let dist = Uniform::new_inclusive(-bound, bound).expect("uniform bounds");
        let mut init = |r: usize, c: usize| Array2::from_shape_fn((r, c), |_| dist.sample(rng));
        let mut layers = Vec::with_capacity(config.layers);
        for l in 0..config.layers {
            let input = if l == 0 { config.obs_dim } else { h };
            let w_y = init(input, 4 * h);
            let w_h = init(h, 4 * h);
            let mut b = init(1, 4 * h);
            b.slice_mut(s![.., h..2 * h]).fill(1.0);
            layers.push(LstmLayer {
                w_y: store.add(format!("{prefix}.l{l}.w_y"), w_y, true),
                w_h: store.add(format!("{prefix}.l{l}.w_h"), w_h, true),
                b: store.add(format!("{prefix}.l{l}.b"), b, true),
            });
        }
        let head_w = store.add(format!("{prefix}.head.w"), init(h, config.summary_dim), true);
        let head_b = store.add(format!("{prefix}.head.b"), init(1, config.summary_dim), true);
        Ok(EncoderModel {
            config,
            layers,
            head_w,
            head_b,
        })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.config
    }

    pub fn zero_state_tape(&self, tape: &mut Tape, batch: usize) -> TapeState {
        let z = tape.input(Array2::zeros((batch, self.config.hidden_dim)));
        TapeState {
            h: vec![z; self.config.layers],
            c: vec![z; self.config.layers],
        }
    }

    /// One time step through every layer. Returns the top-layer hidden state.
    pub fn step_tape(&self, tape: &mut Tape, store: &ParamStore, y: Var, state: &mut TapeState) -> Var {
        let h = self.config.hidden_dim;
        let mut input = y;
        for (l, layer) in self.layers.iter().enumerate() {
            let w_y = tape.param(store, layer.w_y);
            let w_h = tape.param(store, layer.w_h);
            let b = tape.param(store, layer.b);
            let from_input = tape.linear(input, w_y, b, Activation::Identity);
            let from_hidden = tape.matmul(state.h[l], w_h);
            let pre = tape.add(from_input, from_hidden);
            let i_pre = tape.slice_cols(pre, 0, h);
            let f_pre = tape.slice_cols(pre, h, 2 * h);
            let o_pre = tape.slice_cols(pre, 2 * h, 3 * h);
            let g_pre = tape.slice_cols(pre, 3 * h, 4 * h);
            let i = tape.sigmoid(i_pre);
            let f = tape.sigmoid(f_pre);
            let o = tape.sigmoid(o_pre);
            let g = tape.tanh(g_pre);
            let keep = tape.mul(f, state.c[l]);
            let write = tape.mul(i, g);
            let c_new = tape.add(keep, write);
            let tc = tape.tanh(c_new);
            let h_new = tape.mul(o, tc);
            state.c[l] = c_new;
            state.h[l] = h_new;
            input = h_new;
        }
        input
    }

    pub fn head_tape(&self, tape: &mut Tape, store: &ParamStore, h_top: Var) -> Var {
        let w = tape.param(store, self.head_w);
        let b = tape.param(store, self.head_b);
        tape.linear(h_top, w, b, Activation::Identity)
    }

    /// Summaries for a batch of equally long sequences. `ys[t]` holds the
    /// observations at step `t` for every sequence (one row each). With
    /// `truncate = Some(k)` the recurrent state is detached every `k` steps.
    pub fn encode_tape(&self, tape: &mut Tape, store: &ParamStore, ys: &[Var], truncate: Option<usize>) -> Vec<Var> {
        let Some(&first) = ys.first() else {
            return Vec::new();
        };
        let batch = tape.shape(first).0;
        let mut state = self.zero_state_tape(tape, batch);
        let mut out = Vec::with_capacity(ys.len());
        for (t, &y) in ys.iter().enumerate() {
            if let Some(k) = truncate {
                if k > 0 && t > 0 && t % k == 0 {
                    for v in state.h.iter_mut().chain(state.c.iter_mut()) {
                        *v = tape.detach(*v);
                    }
                }
            }
            let top = self.step_tape(tape, store, y, &mut state);
            out.push(self.head_tape(tape, store, top));
        }
        out
    }

    /// One step for a batch of observations (rows). Returns the new state
    /// and the top-layer hidden state.
    pub fn lstm_step(
        &self,
        store: &ParamStore,
        y: ArrayView2<f64>,
        state: &EncoderState,
    ) -> Result<(EncoderState, Array2<f64>)> {
        if y.ncols() != self.config.obs_dim {
            return Err(shape_err("lstm_step", self.config.obs_dim, y.ncols()));
        }
        if state.h.len() != self.config.layers || state.h[0].nrows() != y.nrows() {
            return Err(shape_err(
                "lstm_step",
                format!("{} layers × {} rows", self.config.layers, y.nrows()),
                format!(
                    "{} layers × {} rows",
                    state.h.len(),
                    state.h.first().map_or(0, |h| h.nrows())
                ),
            ));
        }
        let mut tape = Tape::inference();
        let yv = tape.input_view(y);
        let mut ts = TapeState {
            h: state.h.iter().map(|h| tape.input(h.clone())).collect(),
            c: state.c.iter().map(|c| tape.input(c.clone())).collect(),
        };
        let top = self.step_tape(&mut tape, store, yv, &mut ts);
        tape.check_finite()?;
        let next = EncoderState {
            h: ts.h.iter().map(|&v| tape.value(v).clone()).collect(),
            c: ts.c.iter().map(|&v| tape.value(v).clone()).collect(),
        };
        Ok((next, tape.value(top).clone()))
    }

    /// Summary head applied to top-layer hidden states.
    pub fn summary(&self, store: &ParamStore, h_top: ArrayView2<f64>) -> Array2<f64> {
        let mut z = h_top.dot(store.value(self.head_w));
        z += store.value(self.head_b);
        z
    }

    /// Summaries `s_1..s_T` of a single sequence given as a `(T, d_y)` array.
    pub fn encode_sequence(&self, store: &ParamStore, ys: ArrayView2<f64>) -> Result<Array2<f64>> {
        if ys.nrows() == 0 {
            return Err(Error::Empty("observation sequence".into()));
        }
        if ys.ncols() != self.config.obs_dim {
            return Err(shape_err("encode_sequence", self.config.obs_dim, ys.ncols()));
        }
        let mut tape = Tape::inference();
        let steps: Vec<Var> = ys
            .rows()
            .into_iter()
            .map(|r| tape.input(r.to_owned().insert_axis(ndarray::Axis(0))))
            .collect();
        let summaries = self.encode_tape(&mut tape, store, &steps, None);
        tape.check_finite()?;
        let mut out = Array2::zeros((ys.nrows(), self.config.summary_dim));
        for (t, s) in summaries.iter().enumerate() {
            out.row_mut(t).assign(&tape.value(*s).row(0));
        }
        Ok(out)
    }
}
