//! Parameter storage, reverse-mode gradients and the Adam optimizer.

mod optim;
mod params;
mod tape;

pub use optim::{adam_step, clip_grad_norm, AdamConfig};
pub use params::{ParamBlock, ParamId, ParamStore};
pub use tape::{Activation, Tape, Var};

use crate::error::Result;

/// A scalar objective recorded on a tape, with the values of the terms it
/// sums.
#[derive(Debug, Clone)]
pub struct Loss {
    pub var: Var,
    pub value: f64,
    pub terms: Vec<(&'static str, f64)>,
}

/// Fills `params` gradients with `d loss / d param`.
pub fn backprop(tape: &Tape, loss: &Loss, params: &mut ParamStore) -> Result<()> {
    tape.backward(loss.var, params)
}

/// Central finite differences of `f` with respect to every trainable scalar
/// of `store`, in [`ParamStore::flat_values`] order.
pub fn finite_difference_grad(store: &ParamStore, step: f64, mut f: impl FnMut(&ParamStore) -> f64) -> Vec<f64> {
    let base = store.flat_values();
    let mut work = store.clone();
    let mut out = Vec::with_capacity(base.len());
    for (k, &x) in base.iter().enumerate() {
        work.set_flat(k, x + step);
        let fp = f(&work);
        work.set_flat(k, x - step);
        let fm = f(&work);
        work.set_flat(k, x);
        out.push((fp - fm) / (2.0 * step));
    }
    out
}

/// Largest relative discrepancy between two gradient vectors, using
/// `|a-b| / max(|a|, |b|, floor)`.
pub fn max_relative_error(a: &[f64], b: &[f64], floor: f64) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs() / x.abs().max(y.abs()).max(floor))
        .fold(0.0, f64::max)
}
