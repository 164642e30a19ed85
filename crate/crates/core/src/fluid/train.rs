//! Mini-batch Adam training of the joint objective.

use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{default_lambda, joint_loss, ArchConfig, FluidModel};
use crate::error::{Error, Result};
use crate::grad::{adam_step, backprop, clip_grad_norm, AdamConfig, Tape};
use crate::ssm::{Standardization, Trajectories};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    /// Backward-term weight; `(T-1)/T` when absent.
    pub lambda: Option<f64>,
    pub lr: f64,
    /// Learning rate multiplier applied after every epoch.
    pub lr_decay: f64,
    pub grad_clip: Option<f64>,
    pub seed: u64,
    /// Write a checkpoint every this many epochs (0 disables).
    pub checkpoint_every: usize,
    pub val_fraction: f64,
    /// Detach the encoder state every this many steps.
    pub truncate: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 200,
            batch_size: 64,
            lambda: None,
            lr: 1e-3,
            lr_decay: 1.0,
            grad_clip: Some(10.0),
            seed: 0,
            checkpoint_every: 0,
            val_fraction: 0.1,
            truncate: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        if let Some(l) = self.lambda {
            if !(l > 0.0) {
                return Err(Error::Config(format!("lambda must be > 0, got {l}")));
            }
        }
        if !(self.lr > 0.0) || !(self.lr_decay > 0.0) {
            return Err(Error::Config("lr and lr_decay must be > 0".into()));
        }
        if !(0.0..1.0).contains(&self.val_fraction) {
            return Err(Error::Config("val_fraction must lie in [0, 1)".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_nll: f64,
    pub val_nll: f64,
    pub val_filter_nll: f64,
    pub val_backward_nll: f64,
    pub wall_time: f64,
}

#[derive(Debug, Clone, Default)]
pub struct TrainReport {
    pub curve: Vec<EpochLog>,
    pub checkpoints: Vec<PathBuf>,
    /// Loss of the untrained model on the validation split.
    pub initial_val: Option<(f64, f64, f64)>,
}

/// Deterministic 90/10 style split of `n` trajectories.
pub fn split_indices(n: usize, val_fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut idx: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(u64::MAX);
    idx.shuffle(&mut rng);
    let mut n_val = (n as f64 * val_fraction).round() as usize;
    if val_fraction > 0.0 && n >= 2 {
        n_val = n_val.clamp(1, n - 1);
    }
    let val = idx.split_off(n - n_val);
    (idx, val)
}

/// Mean `(total, filter, backward)` loss over a set, evaluated in chunks.
pub fn evaluate_loss(model: &FluidModel, set: &Trajectories, lambda: f64, chunk: usize) -> Result<(f64, f64, f64)> {
    let n = set.count();
    if n == 0 {
        return Err(Error::Empty("evaluation set".into()));
    }
    let mut acc = (0.0, 0.0, 0.0);
    let idx: Vec<usize> = (0..n).collect();
    for c in idx.chunks(chunk.max(1)) {
        let mut tape = Tape::inference();
        let loss = joint_loss(model, &mut tape, &set.select(c), lambda, None)?;
        let w = c.len() as f64 / n as f64;
        acc.0 += w * loss.value;
        acc.1 += w * loss.terms[0].1;
        acc.2 += w * loss.terms[1].1;
    }
    Ok(acc)
}

/// Trains a fresh model on `data` (all paths of one length).
pub fn train(
    data: &Trajectories,
    stats: &Standardization,
    arch: &ArchConfig,
    cfg: &TrainConfig,
    checkpoint_dir: Option<&Path>,
) -> Result<(FluidModel, TrainReport)> {
    let model = FluidModel::new(arch, data.state_dim(), data.obs_dim(), stats, cfg.seed)?;
    resume(model, data, cfg, checkpoint_dir)
}

/// Continues training `model` from `model.trained_epochs` up to
/// `cfg.epochs`. Shuffling depends only on `(seed, epoch)`, so a resumed run
/// follows the same trajectory as an uninterrupted one.
pub fn resume(
    mut model: FluidModel,
    data: &Trajectories,
    cfg: &TrainConfig,
    checkpoint_dir: Option<&Path>,
) -> Result<(FluidModel, TrainReport)> {
    cfg.validate()?;
    let t = data.horizon();
    if t < 2 {
        return Err(Error::Config(format!("training needs T >= 2, got {t}")));
    }
    let lambda = cfg.lambda.unwrap_or_else(|| default_lambda(t));
    let (train_idx, val_idx) = split_indices(data.count(), cfg.val_fraction, cfg.seed);
    if train_idx.is_empty() {
        return Err(Error::Empty("training split".into()));
    }
    let train_set = data.select(&train_idx);
    let val_set = data.select(&val_idx);
    let bs = cfg.batch_size.min(train_set.count());
    let adam = AdamConfig::default();
    let mut report = TrainReport::default();
    if val_set.count() > 0 {
        report.initial_val = Some(evaluate_loss(&model, &val_set, lambda, bs)?);
    }
    let mut last_good: Option<PathBuf> = None;
    let start = Instant::now();
    for epoch in model.trained_epochs..cfg.epochs {
        let lr = cfg.lr * cfg.lr_decay.powi(epoch as i32);
        let step_cfg = AdamConfig { lr, ..adam };
        let mut order: Vec<usize> = (0..train_set.count()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(epoch as u64);
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for chunk in order.chunks(bs) {
            let batch = train_set.select(chunk);
            let mut tape = Tape::new();
            let diverged = |_| Error::Diverged {
                epoch: epoch + 1,
                last_good: last_good.clone(),
            };
            let loss = joint_loss(&model, &mut tape, &batch, lambda, cfg.truncate).map_err(diverged)?;
            backprop(&tape, &loss, &mut model.params).map_err(diverged)?;
            if let Some(c) = cfg.grad_clip {
                let norm = clip_grad_norm(&mut model.params, c)?;
                if !norm.is_finite() {
                    return Err(Error::Diverged {
                        epoch: epoch + 1,
                        last_good,
                    });
                }
            }
            adam_step(&mut model.params, &step_cfg)?;
            total += loss.value * chunk.len() as f64;
        }
        model.trained_epochs = epoch + 1;
        let (val_nll, vf, vb) = if val_set.count() > 0 {
            evaluate_loss(&model, &val_set, lambda, bs)?
        } else {
            (f64::NAN, f64::NAN, f64::NAN)
        };
        report.curve.push(EpochLog {
            epoch: epoch + 1,
            train_nll: total / train_set.count() as f64,
            val_nll,
            val_filter_nll: vf,
            val_backward_nll: vb,
            wall_time: start.elapsed().as_secs_f64(),
        });
        if let Some(dir) = checkpoint_dir {
            if cfg.checkpoint_every > 0 && (epoch + 1) % cfg.checkpoint_every == 0 {
                let path = dir.join(format!("checkpoint_{:05}.fldm", epoch + 1));
                model.save(&path, true)?;
                report.checkpoints.push(path.clone());
                last_good = Some(path);
            }
        }
    }
    Ok((model, report))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn split_is_deterministic_and_disjoint() {
        let (a, b) = split_indices(50, 0.1, 3);
        assert_eq!((a.len(), b.len()), (45, 5));
        let (a2, b2) = split_indices(50, 0.1, 3);
        assert_eq!((a.clone(), b.clone()), (a2, b2));
        let mut all: Vec<usize> = a.into_iter().chain(b).collect();
        all.sort();
        assert_eq!(all, (0..50).collect::<Vec<_>>());
        assert_eq!(split_indices(4, 0.0, 0).1.len(), 0);
    }

    #[test]
    fn rejects_bad_config() {
        let cfg = TrainConfig {
            lambda: Some(0.0),
            ..TrainConfig::default()
        };
        assert!(cfg.validate().is_err());
        let cfg = TrainConfig {
            batch_size: 0,
            ..TrainConfig::default()
        };
        assert!(cfg.validate().is_err());
    }
}
