//! Conditional normalizing flow: a conditional scale-bias layer followed by
//! `K` tanh-clamped affine coupling layers with random-Fourier-feature
//! coupling networks, separated by half-swap permutations.
//!
//! The map `z = T(u; c)` runs scale-bias first, then each coupling layer
//! followed by its permutation. The base density is `N(0, I)`.

use std::f64::consts::PI;

use ndarray::{Array1, Array2, ArrayView2};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal, Uniform};
use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Result};
use crate::grad::{Activation, ParamId, ParamStore, Tape, Var};

/// Architecture of one conditional flow.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FlowConfig {
    pub data_dim: usize,
    pub cond_dim: usize,
    pub num_coupling: usize,
    /// Coupling scales live in `(1 - alpha, 1 + alpha)`.
    pub alpha: f64,
    pub rff_features: usize,
    pub mlp_depth: usize,
    pub mlp_width: usize,
    pub rff_scale_init: f64,
    /// Hidden width of the scale-bias conditioner.
    pub scale_bias_hidden: usize,
}

impl Default for FlowConfig {
    fn default() -> Self {
        FlowConfig {
            data_dim: 2,
            cond_dim: 0,
            num_coupling: 6,
            alpha: 0.6,
            rff_features: 64,
            mlp_depth: 6,
            mlp_width: 64,
            rff_scale_init: 0.0,
            scale_bias_hidden: 64,
        }
    }
}

impl FlowConfig {
    pub fn new(data_dim: usize, cond_dim: usize) -> Self {
        FlowConfig {
            data_dim,
            cond_dim,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        use crate::error::Error::Config;
        if self.data_dim == 0 {
            return Err(Config("flow data_dim must be positive".into()));
        }
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return Err(Config(format!("alpha must lie in (0,1), got {}", self.alpha)));
        }
        if self.num_coupling > 0 && (self.rff_features == 0 || self.mlp_depth == 0 || self.mlp_width == 0) {
            return Err(Config("coupling networks need positive rff/depth/width".into()));
        }
        Ok(())
    }

    /// Size of the conditioning block of each coupling layer.
    pub fn split(&self) -> usize {
        self.data_dim / 2
    }
}

/// Output of a forward evaluation on a batch of rows.
#[derive(Debug, Clone)]
pub struct FlowEval {
    pub output: Array2<f64>,
    pub log_det: Array1<f64>,
}

#[derive(Debug, Clone)]
struct Dense {
    w: ParamId,
    b: ParamId,
}

impl Dense {
    fn new(store: &mut ParamStore, name: &str, fan_in: usize, fan_out: usize, zero: bool, rng: &mut impl Rng) -> Self {
        let (w, b) = if zero {
            (Array2::zeros((fan_in, fan_out)), Array2::zeros((1, fan_out)))
        } else {
            let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
            let dist = Uniform::new_inclusive(-bound, bound).expect("uniform bounds");
            (
                Array2::from_shape_fn((fan_in, fan_out), |_| dist.sample(rng)),
                Array2::from_shape_fn((1, fan_out), |_| dist.sample(rng)),
            )
        };
        Dense {
            w: store.add(format!("{name}.w"), w, true),
            b: store.add(format!("{name}.b"), b, true),
        }
    }

    fn apply(&self, tape: &mut Tape, store: &ParamStore, x: Var, act: Activation) -> Var {
        let w = tape.param(store, self.w);
        let b = tape.param(store, self.b);
        tape.linear(x, w, b, act)
    }
}

#[derive(Debug, Clone)]
struct ScaleBias {
    hidden: Option<Dense>,
    out: Option<Dense>,
    /// Used when the flow is unconditional.
    bias: Option<ParamId>,
}

#[derive(Debug, Clone)]
struct Coupling {
    features: ParamId,
    phase: ParamId,
    log_sigma: ParamId,
    hidden: Vec<Dense>,
    out: Dense,
    log_gamma: ParamId,
}

/// Parameter handles and configuration of one conditional flow. Values live
/// in a [`ParamStore`].
#[derive(Debug, Clone)]
pub struct FlowModel {
    config: FlowConfig,
    scale_bias: ScaleBias,
    couplings: Vec<Coupling>,
}

fn check_cols(op: &'static str, a: &ArrayView2<f64>, cols: usize) -> Result<()> {
    if a.ncols() != cols {
        return Err(shape_err(
            op,
            format!("{cols} columns"),
            format!("{} columns", a.ncols()),
        ));
    }
    Ok(())
}

/// Repeats a single conditioning row to `n` rows; passes through otherwise.
fn expand_cond(op: &'static str, c: ArrayView2<f64>, n: usize, d_c: usize) -> Result<Array2<f64>> {
    check_cols(op, &c, d_c)?;
    if c.nrows() == n {
        Ok(c.to_owned())
    } else if c.nrows() == 1 {
        Ok(c.broadcast((n, d_c)).expect("row broadcast").to_owned())
    } else {
        Err(shape_err(op, format!("1 or {n} conditioning rows"), c.nrows()))
    }
}

impl FlowModel {
    /// Registers a freshly initialized flow under `prefix`. Output layers are
    /// zero so the flow starts as the identity map.
    pub fn new(store: &mut ParamStore, prefix: &str, config: FlowConfig, rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        let mut config = config;
        if config.data_dim < 2 && config.num_coupling > 0 {
            eprintln!("warning: flow `{prefix}` has data_dim 1; coupling layers disabled, using scale-bias only");
            config.num_coupling = 0;
        }
        let d = config.data_dim;
        let d_c = config.cond_dim;
        let scale_bias = if d_c == 0 {
            ScaleBias {
                hidden: None,
                out: None,
                bias: Some(store.add(format!("{prefix}.sb.bias"), Array2::zeros((1, 2 * d)), true)),
            }
        } else {
            let h = config.scale_bias_hidden;
            let (hidden, out_in) = if h > 0 {
                (
                    Some(Dense::new(store, &format!("{prefix}.sb.h"), d_c, h, false, rng)),
                    h,
                )
            } else {
                (None, d_c)
            };
            ScaleBias {
                hidden,
                out: Some(Dense::new(store, &format!("{prefix}.sb.out"), out_in, 2 * d, true, rng)),
                bias: None,
            }
        };
        let k = config.split();
        let m = d - k;
        let input = k + d_c;
        let r = config.rff_features;
        let mut couplings = Vec::with_capacity(config.num_coupling);
        for layer in 0..config.num_coupling {
            let name = format!("{prefix}.c{layer}");
            let normal = StandardNormal;
            let features = Array2::from_shape_fn((input, r), |_| normal.sample(rng));
            let phase_dist = Uniform::new(0.0, 2.0 * PI).expect("uniform bounds");
            let phase = Array2::from_shape_fn((1, r), |_| phase_dist.sample(rng));
            let features = store.add(format!("{name}.rff_f"), features, false);
            let phase = store.add(format!("{name}.rff_b"), phase, false);
            let log_sigma = store.add(
                format!("{name}.rff_sigma"),
                Array2::from_elem((1, 1), config.rff_scale_init),
                true,
            );
            let mut hidden = Vec::with_capacity(config.mlp_depth);
            let mut fan_in = 2 * r + input;
            for j in 0..config.mlp_depth {
                hidden.push(Dense::new(
                    store,
                    &format!("{name}.h{j}"),
                    fan_in,
                    config.mlp_width,
                    false,
                    rng,
                ));
                fan_in = config.mlp_width;
            }
            let out = Dense::new(store, &format!("{name}.out"), fan_in, 2 * m, true, rng);
            let log_gamma = store.add(format!("{name}.log_gamma"), Array2::zeros((1, m)), true);
            couplings.push(Coupling {
                features,
                phase,
                log_sigma,
                hidden,
                out,
                log_gamma,
            });
        }
        Ok(FlowModel {
            config,
            scale_bias,
            couplings,
        })
    }

    pub fn config(&self) -> &FlowConfig {
        &self.config
    }

    pub fn num_coupling(&self) -> usize {
        self.couplings.len()
    }

    // ---- tape-level building blocks -------------------------------------

    /// `(eta, xi)` of the scale-bias layer, each `(n or 1) × d_u`.
    fn scale_bias_terms(&self, tape: &mut Tape, store: &ParamStore, c: Option<Var>) -> (Var, Var) {
        let d = self.config.data_dim;
        let out = match (&self.scale_bias.bias, c) {
            (Some(bias), _) => tape.param(store, *bias),
            (None, Some(c)) => {
                let mut h = c;
                if let Some(hidden) = &self.scale_bias.hidden {
                    h = hidden.apply(tape, store, h, Activation::Silu);
                }
                self.scale_bias.out.as_ref().expect("conditional scale-bias").apply(
                    tape,
                    store,
                    h,
                    Activation::Identity,
                )
            }
            (None, None) => panic!("conditional flow evaluated without conditioning input"),
        };
        let eta = tape.slice_cols(out, 0, d);
        let xi = tape.slice_cols(out, d, 2 * d);
        (eta, xi)
    }

    /// Returns `(s, t)` of coupling layer `layer` for input `x = [u1, c]`.
    pub fn coupling_net_tape(&self, tape: &mut Tape, store: &ParamStore, layer: usize, x: Var) -> (Var, Var) {
        let cpl = &self.couplings[layer];
        let m = self.config.data_dim - self.config.split();
        let f = tape.param(store, cpl.features);
        let b0 = tape.param(store, cpl.phase);
        let log_sigma = tape.param(store, cpl.log_sigma);
        let fx = tape.matmul(x, f);
        let neg = tape.neg(log_sigma);
        let inv_scale = tape.exp(neg);
        let scaled = tape.mul(fx, inv_scale);
        let proj = tape.add(scaled, b0);
        let sin = tape.sin(proj);
        let cos = tape.cos(proj);
        let mut h = tape.concat_cols(&[sin, cos, x]);
        for dense in &cpl.hidden {
            h = dense.apply(tape, store, h, Activation::Silu);
        }
        let out = cpl.out.apply(tape, store, h, Activation::Identity);
        let s = tape.slice_cols(out, 0, m);
        let t = tape.slice_cols(out, m, 2 * m);
        (s, t)
    }

    fn coupling_input(&self, tape: &mut Tape, u1: Var, c: Option<Var>) -> Var {
        match c {
            Some(c) => tape.concat_cols(&[u1, c]),
            None => u1,
        }
    }

    /// Coupling scale `1 + alpha·tanh(s)` and shift `gamma ⊙ tanh(t)`.
    fn coupling_affine(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        layer: usize,
        u1: Var,
        c: Option<Var>,
    ) -> (Var, Var) {
        let x = self.coupling_input(tape, u1, c);
        let (s, t) = self.coupling_net_tape(tape, store, layer, x);
        let ts = tape.tanh(s);
        let sc = tape.scale(ts, self.config.alpha);
        let scale = tape.add_scalar(sc, 1.0);
        let log_gamma = tape.param(store, self.couplings[layer].log_gamma);
        let gamma = tape.exp(log_gamma);
        let tt = tape.tanh(t);
        let shift = tape.mul(tt, gamma);
        (scale, shift)
    }

    pub fn scale_bias_forward_tape(&self, tape: &mut Tape, store: &ParamStore, u: Var, c: Option<Var>) -> (Var, Var) {
        let (eta, xi) = self.scale_bias_terms(tape, store, c);
        let e = tape.exp(eta);
        let scaled = tape.mul(u, e);
        let out = tape.add(scaled, xi);
        let mut ld = tape.row_sum(eta);
        if tape.shape(ld).0 != tape.shape(u).0 {
            // unconditional: broadcast the single row
            let zeros = tape.input(Array2::zeros((tape.shape(u).0, 1)));
            ld = tape.add(zeros, ld);
        }
        (out, ld)
    }

    pub fn scale_bias_inverse_tape(&self, tape: &mut Tape, store: &ParamStore, v: Var, c: Option<Var>) -> Var {
        let (eta, xi) = self.scale_bias_terms(tape, store, c);
        let centered = tape.sub(v, xi);
        let neg = tape.neg(eta);
        let e = tape.exp(neg);
        tape.mul(centered, e)
    }

    pub fn coupling_forward_tape(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        layer: usize,
        u: Var,
        c: Option<Var>,
    ) -> (Var, Var) {
        let d = self.config.data_dim;
        let k = self.config.split();
        let u1 = tape.slice_cols(u, 0, k);
        let u2 = tape.slice_cols(u, k, d);
        let (scale, shift) = self.coupling_affine(tape, store, layer, u1, c);
        let prod = tape.mul(scale, u2);
        let v2 = tape.add(prod, shift);
        let out = tape.concat_cols(&[u1, v2]);
        let logs = tape.log(scale);
        let ld = tape.row_sum(logs);
        (out, ld)
    }

    pub fn coupling_inverse_tape(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        layer: usize,
        v: Var,
        c: Option<Var>,
    ) -> Var {
        let d = self.config.data_dim;
        let k = self.config.split();
        let v1 = tape.slice_cols(v, 0, k);
        let v2 = tape.slice_cols(v, k, d);
        let (scale, shift) = self.coupling_affine(tape, store, layer, v1, c);
        let centered = tape.sub(v2, shift);
        let u2 = tape.div(centered, scale);
        tape.concat_cols(&[v1, u2])
    }

    /// Half-swap: `[x[k..], x[..k]]`.
    fn permute(&self, tape: &mut Tape, x: Var) -> Var {
        let d = self.config.data_dim;
        let k = self.config.split();
        let a = tape.slice_cols(x, k, d);
        let b = tape.slice_cols(x, 0, k);
        tape.concat_cols(&[a, b])
    }

    fn unpermute(&self, tape: &mut Tape, x: Var) -> Var {
        let d = self.config.data_dim;
        let k = self.config.split();
        let a = tape.slice_cols(x, d - k, d);
        let b = tape.slice_cols(x, 0, d - k);
        tape.concat_cols(&[a, b])
    }

    /// Full forward map on the tape. Returns `(z, log_det)` with `log_det`
    /// an `(n, 1)` column.
    pub fn forward_tape(&self, tape: &mut Tape, store: &ParamStore, u: Var, c: Option<Var>) -> (Var, Var) {
        let (mut x, mut ld) = self.scale_bias_forward_tape(tape, store, u, c);
        for layer in 0..self.couplings.len() {
            let (y, l) = self.coupling_forward_tape(tape, store, layer, x, c);
            ld = tape.add(ld, l);
            x = self.permute(tape, y);
        }
        (x, ld)
    }

    pub fn inverse_tape(&self, tape: &mut Tape, store: &ParamStore, z: Var, c: Option<Var>) -> Var {
        let mut x = z;
        for layer in (0..self.couplings.len()).rev() {
            let y = self.unpermute(tape, x);
            x = self.coupling_inverse_tape(tape, store, layer, y, c);
        }
        self.scale_bias_inverse_tape(tape, store, x, c)
    }

    /// Row-wise `log p(u | c)` as an `(n, 1)` column.
    pub fn log_prob_tape(&self, tape: &mut Tape, store: &ParamStore, u: Var, c: Option<Var>) -> Var {
        let d = self.config.data_dim as f64;
        let (z, ld) = self.forward_tape(tape, store, u, c);
        let z2 = tape.square(z);
        let sq = tape.row_sum(z2);
        let half = tape.scale(sq, -0.5);
        let base = tape.add_scalar(half, -0.5 * d * (2.0 * PI).ln());
        tape.add(base, ld)
    }

    // ---- array-level API ------------------------------------------------

    fn prepare(
        &self,
        op: &'static str,
        tape: &mut Tape,
        x: ArrayView2<f64>,
        c: ArrayView2<f64>,
    ) -> Result<(Var, Option<Var>)> {
        check_cols(op, &x, self.config.data_dim)?;
        let xv = tape.input_view(x);
        let cv = if self.config.cond_dim == 0 {
            None
        } else {
            Some(tape.input(expand_cond(op, c, x.nrows(), self.config.cond_dim)?))
        };
        Ok((xv, cv))
    }

    fn finish_eval(tape: &Tape, out: Var, ld: Var) -> Result<FlowEval> {
        tape.check_finite()?;
        Ok(FlowEval {
            output: tape.value(out).clone(),
            log_det: tape.value(ld).column(0).to_owned(),
        })
    }

    /// Conditional scale-bias layer alone.
    pub fn scale_bias_forward(&self, store: &ParamStore, u: ArrayView2<f64>, c: ArrayView2<f64>) -> Result<FlowEval> {
        let mut tape = Tape::inference();
        let (u, c) = self.prepare("scale_bias_forward", &mut tape, u, c)?;
        let (out, ld) = self.scale_bias_forward_tape(&mut tape, store, u, c);
        Self::finish_eval(&tape, out, ld)
    }

    pub fn scale_bias_inverse(
        &self,
        store: &ParamStore,
        v: ArrayView2<f64>,
        c: ArrayView2<f64>,
    ) -> Result<Array2<f64>> {
        let mut tape = Tape::inference();
        let (v, c) = self.prepare("scale_bias_inverse", &mut tape, v, c)?;
        let out = self.scale_bias_inverse_tape(&mut tape, store, v, c);
        tape.check_finite()?;
        Ok(tape.value(out).clone())
    }

    /// Coupling layer `layer` alone (no permutation).
    pub fn coupling_forward(
        &self,
        store: &ParamStore,
        layer: usize,
        u: ArrayView2<f64>,
        c: ArrayView2<f64>,
    ) -> Result<FlowEval> {
        let mut tape = Tape::inference();
        let (u, c) = self.prepare("coupling_forward", &mut tape, u, c)?;
        let (out, ld) = self.coupling_forward_tape(&mut tape, store, layer, u, c);
        Self::finish_eval(&tape, out, ld)
    }

    pub fn coupling_inverse(
        &self,
        store: &ParamStore,
        layer: usize,
        v: ArrayView2<f64>,
        c: ArrayView2<f64>,
    ) -> Result<Array2<f64>> {
        let mut tape = Tape::inference();
        let (v, c) = self.prepare("coupling_inverse", &mut tape, v, c)?;
        let out = self.coupling_inverse_tape(&mut tape, store, layer, v, c);
        tape.check_finite()?;
        Ok(tape.value(out).clone())
    }

    /// Per-coordinate scale factors `1 + alpha·tanh(s)` of coupling `layer`.
    pub fn coupling_scales(
        &self,
        store: &ParamStore,
        layer: usize,
        u: ArrayView2<f64>,
        c: ArrayView2<f64>,
    ) -> Result<Array2<f64>> {
        let mut tape = Tape::inference();
        let (u, c) = self.prepare("coupling_scales", &mut tape, u, c)?;
        let u1 = tape.slice_cols(u, 0, self.config.split());
        let (scale, _) = self.coupling_affine(&mut tape, store, layer, u1, c);
        Ok(tape.value(scale).clone())
    }

    /// Raw `(s, t)` of the coupling network for inputs `x = [u1, c]`.
    pub fn coupling_net(
        &self,
        store: &ParamStore,
        layer: usize,
        x: ArrayView2<f64>,
    ) -> Result<(Array2<f64>, Array2<f64>)> {
        check_cols("coupling_net", &x, self.config.split() + self.config.cond_dim)?;
        let mut tape = Tape::inference();
        let xv = tape.input_view(x);
        let (s, t) = self.coupling_net_tape(&mut tape, store, layer, xv);
        tape.check_finite()?;
        Ok((tape.value(s).clone(), tape.value(t).clone()))
    }

    /// `z = T(u; c)` and `log|det ∇T|` for each row.
    pub fn forward(&self, store: &ParamStore, u: ArrayView2<f64>, c: ArrayView2<f64>) -> Result<FlowEval> {
        let mut tape = Tape::inference();
        let (u, c) = self.prepare("flow_forward", &mut tape, u, c)?;
        let (z, ld) = self.forward_tape(&mut tape, store, u, c);
        Self::finish_eval(&tape, z, ld)
    }

    pub fn inverse(&self, store: &ParamStore, z: ArrayView2<f64>, c: ArrayView2<f64>) -> Result<Array2<f64>> {
        let mut tape = Tape::inference();
        let (z, c) = self.prepare("flow_inverse", &mut tape, z, c)?;
        let u = self.inverse_tape(&mut tape, store, z, c);
        tape.check_finite()?;
        Ok(tape.value(u).clone())
    }

    pub fn log_prob(&self, store: &ParamStore, u: ArrayView2<f64>, c: ArrayView2<f64>) -> Result<Array1<f64>> {
        let mut tape = Tape::inference();
        let (u, c) = self.prepare("log_prob", &mut tape, u, c)?;
        let lp = self.log_prob_tape(&mut tape, store, u, c);
        tape.check_finite()?;
        Ok(tape.value(lp).column(0).to_owned())
    }

    /// Draws `n` samples. `c` is either one row shared by all draws or `n`
    /// rows.
    pub fn sample(&self, store: &ParamStore, c: ArrayView2<f64>, n: usize, rng: &mut impl Rng) -> Result<Array2<f64>> {
        let z = standard_normal((n, self.config.data_dim), rng);
        self.inverse(store, z.view(), c)
    }
}

pub(crate) fn standard_normal(shape: (usize, usize), rng: &mut impl Rng) -> Array2<f64> {
    Array2::from_shape_simple_fn(shape, || StandardNormal.sample(rng))
}

/// Empty conditioning block for unconditional flows.
pub fn no_cond(n: usize) -> Array2<f64> {
    Array2::zeros((n, 0))
}

/// Single conditioning row from a slice.
pub fn cond_row(c: &[f64]) -> Array2<f64> {
    Array2::from_shape_vec((1, c.len()), c.to_vec()).expect("row shape")
}
