use std::collections::BTreeMap;

use ndarray::Array2;

use crate::error::{Error, Result};

/// Handle to a block inside a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

/// One named dense parameter block with its gradient accumulator and Adam
/// moments. All four arrays always share the same shape.
#[derive(Debug, Clone)]
pub struct ParamBlock {
    pub name: String,
    pub value: Array2<f64>,
    pub grad: Array2<f64>,
    pub m: Array2<f64>,
    pub v: Array2<f64>,
    /// Frozen blocks (random features, standardization records) never
    /// receive gradients and are skipped by the optimizer.
    pub trainable: bool,
    pub step: u64,
}

/// Flat registry of every parameter block of a model.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    blocks: Vec<ParamBlock>,
    index: BTreeMap<String, ParamId>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers a new block. Names must be unique.
    pub fn add(&mut self, name: impl Into<String>, value: Array2<f64>, trainable: bool) -> ParamId {
        let name = name.into();
        assert!(!self.index.contains_key(&name), "duplicate parameter block `{name}`");
        let id = ParamId(self.blocks.len());
        let zeros = Array2::zeros(value.raw_dim());
        self.blocks.push(ParamBlock {
            name: name.clone(),
            grad: zeros.clone(),
            m: zeros.clone(),
            v: zeros,
            value,
            trainable,
            step: 0,
        });
        self.index.insert(name, id);
        id
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied()
    }

    pub fn value(&self, id: ParamId) -> &Array2<f64> {
        &self.blocks[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Array2<f64> {
        &mut self.blocks[id.0].value
    }

    pub fn grad(&self, id: ParamId) -> &Array2<f64> {
        &self.blocks[id.0].grad
    }

    pub fn block(&self, id: ParamId) -> &ParamBlock {
        &self.blocks[id.0]
    }

    pub fn blocks(&self) -> &[ParamBlock] {
        &self.blocks
    }

    pub(crate) fn blocks_mut(&mut self) -> &mut [ParamBlock] {
        &mut self.blocks
    }

    pub fn len(&self) -> usize {
        self.blocks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.blocks.is_empty()
    }

    /// Number of trainable scalars.
    pub fn num_trainable(&self) -> usize {
        self.blocks.iter().filter(|b| b.trainable).map(|b| b.value.len()).sum()
    }

    pub(crate) fn accumulate(&mut self, id: ParamId, g: &Array2<f64>) {
        let block = &mut self.blocks[id.0];
        if block.trainable {
            block.grad += g;
        }
    }

    pub fn zero_grad(&mut self) {
        for b in &mut self.blocks {
            b.grad.fill(0.0);
        }
    }

    /// Global L2 norm over all trainable gradients.
    pub fn grad_norm(&self) -> f64 {
        self.blocks
            .iter()
            .filter(|b| b.trainable)
            .map(|b| b.grad.iter().map(|g| g * g).sum::<f64>())
            .sum::<f64>()
            .sqrt()
    }

    /// Copies values (and optionally optimizer state) from a store with the
    /// same layout.
    pub fn copy_from(&mut self, other: &ParamStore, with_optimizer: bool) -> Result<()> {
        if other.blocks.len() != self.blocks.len() {
            return Err(Error::Format(format!(
                "parameter layout mismatch: {} vs {} blocks",
                self.blocks.len(),
                other.blocks.len()
            )));
        }
        for (dst, src) in self.blocks.iter_mut().zip(&other.blocks) {
            if dst.name != src.name || dst.value.dim() != src.value.dim() {
                return Err(Error::Format(format!(
                    "parameter block mismatch: {} {:?} vs {} {:?}",
                    dst.name,
                    dst.value.dim(),
                    src.name,
                    src.value.dim()
                )));
            }
            dst.value.assign(&src.value);
            if with_optimizer {
                dst.m.assign(&src.m);
                dst.v.assign(&src.v);
                dst.step = src.step;
            }
        }
        Ok(())
    }

    /// Flattened trainable values in registration order.
    pub fn flat_values(&self) -> Vec<f64> {
        self.blocks
            .iter()
            .filter(|b| b.trainable)
            .flat_map(|b| b.value.iter().copied())
            .collect()
    }

    /// Flattened trainable gradients in registration order.
    pub fn flat_grads(&self) -> Vec<f64> {
        self.blocks
            .iter()
            .filter(|b| b.trainable)
            .flat_map(|b| b.grad.iter().copied())
            .collect()
    }

    /// Writes into the trainable scalar at flat position `k`.
    pub fn set_flat(&mut self, mut k: usize, x: f64) {
        for b in self.blocks.iter_mut().filter(|b| b.trainable) {
            if k < b.value.len() {
                let cols = b.value.ncols();
                b.value[[k / cols, k % cols]] = x;
                return;
            }
            k -= b.value.len();
        }
        panic!("flat index out of range");
    }
}
