//! Adam with decoupled weight decay and a cosine learning-rate schedule.

use alloc::vec::Vec;

use crate::params::{Gradients, ParamStore};
use crate::tensor::Matrix;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Global gradient-norm clip; `0` disables clipping.
    pub clip_norm: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
            clip_norm: 1.0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Adam {
    cfg: AdamConfig,
    first: Vec<Option<Matrix>>,
    second: Vec<Option<Matrix>>,
    steps: u64,
}

impl Adam {
    pub fn new(cfg: AdamConfig) -> Self {
        Self {
            cfg,
            first: Vec::new(),
            second: Vec::new(),
            steps: 0,
        }
    }

    pub fn config(&self) -> &AdamConfig {
        &self.cfg
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    /// Applies one update at learning rate `lr` to every trainable parameter
    /// that has a gradient.
    pub fn step(&mut self, store: &mut ParamStore, grads: &Gradients, lr: f64) {
        let n = store.len();
        self.first.resize(n, None);
        self.second.resize(n, None);
        self.steps += 1;
        let t = self.steps as i32;
        let c = &self.cfg;
        let clip = if c.clip_norm > 0.0 {
            let norm = grads.global_norm();
            if norm > c.clip_norm {
                c.clip_norm / norm
            } else {
                1.0
            }
        } else {
            1.0
        };
        let bc1 = 1.0 - libm::pow(c.beta1, t as f64);
        let bc2 = 1.0 - libm::pow(c.beta2, t as f64);
        for (id, g) in grads.iter() {
            if !store.is_trainable(id) {
                continue;
            }
            let i = id.index();
            let (rows, cols) = g.shape();
            let m = self.first[i].get_or_insert_with(|| Matrix::zeros(rows, cols));
            let v = self.second[i].get_or_insert_with(|| Matrix::zeros(rows, cols));
            let p = store.get_mut(id);
            for k in 0..g.len() {
                let gk = g.data()[k] * clip;
                let mk = &mut m.data_mut()[k];
                *mk = c.beta1 * *mk + (1.0 - c.beta1) * gk;
                let vk = &mut v.data_mut()[k];
                *vk = c.beta2 * *vk + (1.0 - c.beta2) * gk * gk;
                let mhat = m.data()[k] / bc1;
                let vhat = v.data()[k] / bc2;
                let pk = &mut p.data_mut()[k];
                *pk -= lr * (mhat / (libm::sqrt(vhat) + c.eps) + c.weight_decay * *pk);
            }
        }
    }
}

/// Cosine decay from `base` to `base * floor` over `total` steps, after a
/// linear warmup of `warmup` steps.
pub fn cosine_lr(base: f64, step: usize, total: usize, warmup: usize, floor: f64) -> f64 {
    if warmup > 0 && step < warmup {
        return base * (step + 1) as f64 / warmup as f64;
    }
    let span = total.saturating_sub(warmup).max(1) as f64;
    let progress = ((step - warmup.min(step)) as f64 / span).min(1.0);
    let cos = 0.5 * (1.0 + libm::cos(core::f64::consts::PI * progress));
    base * (floor + (1.0 - floor) * cos)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::Graph;

    #[test]
    fn adam_minimizes_quadratic() {
        let mut store = ParamStore::new();
        let w = store.add("w", Matrix::from_rows(&[[3.0, -2.0]]).unwrap());
        let mut opt = Adam::new(AdamConfig {
            lr: 0.1,
            clip_norm: 0.0,
            ..Default::default()
        });
        for _ in 0..300 {
            let grads = {
                let mut g = Graph::with_params(&store);
                let x = g.param(w);
                let sq = g.mul(x, x).unwrap();
                let l = g.sum(sq);
                g.backward(l).unwrap().into_params()
            };
            opt.step(&mut store, &grads, 0.1);
        }
        assert!(store.get(w).data().iter().all(|v| v.abs() < 1e-2));
    }

    #[test]
    fn cosine_schedule_endpoints() {
        assert_eq!(cosine_lr(1.0, 0, 100, 0, 0.0), 1.0);
        assert!(cosine_lr(1.0, 100, 100, 0, 0.1) - 0.1 < 1e-12);
        assert!((cosine_lr(1.0, 50, 100, 0, 0.0) - 0.5).abs() < 1e-12);
        assert!((cosine_lr(2.0, 0, 100, 4, 0.0) - 0.5).abs() < 1e-12);
    }
}
