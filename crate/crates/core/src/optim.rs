//! AdamW with decoupled weight decay and a warmup-then-cosine learning rate.

use std::f64::consts::PI;

use crate::params::ParamStore;
use crate::tensor::Tensor;

/// Linear warmup over `warmup` steps, then cosine decay to zero at `total`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Schedule {
    pub base_lr: f64,
    pub warmup: usize,
    pub total: usize,
}

impl Schedule {
    pub fn new(base_lr: f64, warmup: usize, total: usize) -> Self {
        Self { base_lr, warmup, total }
    }

    /// Learning rate of the zero-based `step`.
    pub fn lr(&self, step: usize) -> f64 {
        if step < self.warmup {
            return self.base_lr * (step + 1) as f64 / self.warmup as f64;
        }
        let span = self.total.saturating_sub(self.warmup);
        if span == 0 {
            return self.base_lr;
        }
        let progress = ((step - self.warmup) as f64 / span as f64).min(1.0);
        self.base_lr * 0.5 * (1.0 + (PI * progress).cos())
    }
}

#[derive(Debug, Clone)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    steps: u64,
    moments: Vec<Option<(Vec<f64>, Vec<f64>)>>,
}

impl AdamW {
    pub fn new(weight_decay: f64) -> Self {
        Self { beta1: 0.9, beta2: 0.95, eps: 1e-8, weight_decay, steps: 0, moments: Vec::new() }
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    /// One update of every trainable entry that received a gradient.
    ///
    /// `grads` is aligned with `store.entries()`. Decay applies only to entries
    /// flagged `decay`.
    pub fn step(&mut self, store: &mut ParamStore, grads: &[Option<Tensor>], lr: f64) {
        assert_eq!(grads.len(), store.len(), "gradient list does not match the store");
        if self.moments.len() < store.len() {
            self.moments.resize(store.len(), None);
        }
        self.steps += 1;
        let t = self.steps as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for (i, entry) in store.entries_mut().iter_mut().enumerate() {
            let Some(g) = grads[i].as_ref().filter(|_| entry.trainable) else { continue };
            let n = g.numel();
            let (m, v) = self.moments[i].get_or_insert_with(|| (vec![0.0; n], vec![0.0; n]));
            let decay = if entry.decay { lr * self.weight_decay } else { 0.0 };
            for (((p, &g), m), v) in entry.value.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut())
            {
                *m = self.beta1 * *m + (1.0 - self.beta1) * g;
                *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
                let update = (*m / c1) / ((*v / c2).sqrt() + self.eps);
                *p -= decay * *p + lr * update;
            }
        }
    }
}
