use ndarray::Zip;

use super::params::ParamStore;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub betas: (f64, f64),
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-3,
            betas: (0.9, 0.999),
            eps: 1e-8,
        }
    }
}

/// Bias-corrected Adam update on every trainable block, then clears the
/// gradients. The step counter advances even when a gradient is zero.
pub fn adam_step(store: &mut ParamStore, cfg: &AdamConfig) -> Result<()> {
    if !(cfg.lr > 0.0) {
        return Err(Error::Config(format!("learning rate must be > 0, got {}", cfg.lr)));
    }
    let (b1, b2) = cfg.betas;
    if !(0.0..1.0).contains(&b1) || !(0.0..1.0).contains(&b2) {
        return Err(Error::Config(format!("betas must lie in [0, 1), got {:?}", cfg.betas)));
    }
    for block in store.blocks_mut() {
        if !block.trainable {
            block.grad.fill(0.0);
            continue;
        }
        block.step += 1;
        let t = block.step as i32;
        let c1 = 1.0 - b1.powi(t);
        let c2 = 1.0 - b2.powi(t);
        Zip::from(&mut block.value)
            .and(&mut block.m)
            .and(&mut block.v)
            .and(&block.grad)
            .for_each(|p, m, v, &g| {
                *m = b1 * *m + (1.0 - b1) * g;
                *v = b2 * *v + (1.0 - b2) * g * g;
                let m_hat = *m / c1;
                let v_hat = *v / c2;
                *p -= cfg.lr * m_hat / (v_hat.sqrt() + cfg.eps);
            });
        block.grad.fill(0.0);
    }
    Ok(())
}

/// Rescales all trainable gradients so their global L2 norm is at most
/// `max_norm`. Returns the norm before clipping.
pub fn clip_grad_norm(store: &mut ParamStore, max_norm: f64) -> Result<f64> {
    if !(max_norm > 0.0) {
        return Err(Error::Config(format!("max_norm must be > 0, got {max_norm}")));
    }
    let norm = store.grad_norm();
    if norm > max_norm {
        let factor = max_norm / norm;
        for block in store.blocks_mut().iter_mut().filter(|b| b.trainable) {
            block.grad.mapv_inplace(|g| g * factor);
        }
    }
    Ok(norm)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{array, Array2};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn scalar_store(x: f64) -> (ParamStore, super::super::ParamId) {
        let mut s = ParamStore::new();
        let id = s.add("x", array![[x]], true);
        (s, id)
    }

    #[test]
    fn zero_gradient_leaves_parameters() {
        let mut s = ParamStore::new();
        let id = s.add("w", array![[1.0, -2.0], [0.5, 3.0]], true);
        adam_step(&mut s, &AdamConfig::default()).unwrap();
        assert_eq!(s.value(id), &array![[1.0, -2.0], [0.5, 3.0]]);
        assert_eq!(s.block(id).step, 1);
    }

    #[test]
    fn first_step_moves_by_lr() {
        // m̂ = g, v̂ = g², so Δ = lr·g/(|g|+eps) ≈ lr.
        let (mut s, id) = scalar_store(0.0);
        s.blocks_mut()[0].grad[[0, 0]] = 1.0;
        adam_step(&mut s, &AdamConfig::default()).unwrap();
        let delta = -s.value(id)[[0, 0]];
        assert!((delta - 0.001).abs() < 1e-10, "{delta}");
        assert_eq!(s.grad(id)[[0, 0]], 0.0);
    }

    #[test]
    fn constant_gradient_update_converges_to_lr() {
        // With constant g, m̂ = g and v̂ = g² at every step, so every update
        // equals lr·|g|/(|g|+eps).
        let (mut s, id) = scalar_store(0.0);
        let cfg = AdamConfig::default();
        let mut prev = 0.0;
        let mut last = 0.0;
        for _ in 0..500 {
            s.blocks_mut()[0].grad[[0, 0]] = 0.3;
            adam_step(&mut s, &cfg).unwrap();
            let x = s.value(id)[[0, 0]];
            last = prev - x;
            prev = x;
        }
        assert!((last - cfg.lr).abs() < 1e-9, "{last}");
    }

    #[test]
    fn rejects_bad_learning_rate() {
        let (mut s, _) = scalar_store(0.0);
        let cfg = AdamConfig {
            lr: 0.0,
            ..AdamConfig::default()
        };
        assert!(matches!(adam_step(&mut s, &cfg), Err(Error::Config(_))));
    }

    #[test]
    fn deterministic_given_state() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let w = Array2::from_shape_fn((3, 4), |_| rng.random::<f64>());
        let g = Array2::from_shape_fn((3, 4), |_| rng.random::<f64>() - 0.5);
        let run = || {
            let mut s = ParamStore::new();
            s.add("w", w.clone(), true);
            for _ in 0..3 {
                s.blocks_mut()[0].grad.assign(&g);
                adam_step(&mut s, &AdamConfig::default()).unwrap();
            }
            s.blocks()[0].value.clone()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn clipping_behaviour() {
        let mut s = ParamStore::new();
        s.add("a", array![[2.0, 0.0]], true);
        s.blocks_mut()[0].grad.assign(&array![[2.0, 0.0]]);
        let n = clip_grad_norm(&mut s, 1.0).unwrap();
        assert_eq!(n, 2.0);
        assert_eq!(s.blocks()[0].grad, array![[1.0, 0.0]]);

        s.blocks_mut()[0].grad.assign(&array![[0.3, 0.4]]);
        clip_grad_norm(&mut s, 1.0).unwrap();
        assert_eq!(s.blocks()[0].grad, array![[0.3, 0.4]]);

        assert!(clip_grad_norm(&mut s, 0.0).is_err());
    }

    #[test]
    fn clipped_norm_bounded_on_random_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for trial in 0..50 {
            let mut s = ParamStore::new();
            for b in 0..3 {
                let g = Array2::from_shape_fn((4, 5), |_| 10.0 * (rng.random::<f64>() - 0.5));
                s.add(format!("b{b}"), Array2::zeros((4, 5)), true);
                s.blocks_mut()[b].grad.assign(&g);
            }
            let max = 0.1 + trial as f64 * 0.2;
            clip_grad_norm(&mut s, max).unwrap();
            assert!(s.grad_norm() <= max + 1e-12);
        }
    }
}
