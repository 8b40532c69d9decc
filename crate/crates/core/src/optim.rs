//! AdamW with decoupled weight decay, plus the warmup/cosine schedule.

use serde::{Deserialize, Serialize};

use crate::autograd::{ParamKind, ParamStore};
use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-5,
        }
    }
}

/// Moment estimates are kept per store entry; buffers get empty slots.
#[derive(Clone, Debug)]
pub struct AdamW<T> {
    pub config: AdamWConfig,
    pub step: u64,
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
}

impl<T: Real> AdamW<T> {
    pub fn new(store: &ParamStore<T>, config: AdamWConfig) -> Self {
        let zeros = |e: &crate::autograd::ParamEntry<T>| match e.kind {
            ParamKind::Trainable => Tensor::zeros(e.value.shape()),
            ParamKind::Buffer => Tensor::zeros([0, 0, 0, 0, 0]),
        };
        AdamW {
            config,
            step: 0,
            m: store.entries().iter().map(zeros).collect(),
            v: store.entries().iter().map(zeros).collect(),
        }
    }

    /// One update at learning rate `lr` using the gradients held in `store`.
    pub fn step(&mut self, store: &mut ParamStore<T>, lr: f64) -> Result<()> {
        if self.m.len() != store.len() {
            return Err(Error::arg(format!(
                "optimizer tracks {} parameters, store has {}",
                self.m.len(),
                store.len()
            )));
        }
        self.step += 1;
        let c = self.config;
        let bc1 = 1.0 - c.beta1.powi(self.step as i32);
        let bc2 = 1.0 - c.beta2.powi(self.step as i32);
        let (b1, b2) = (T::lit(c.beta1), T::lit(c.beta2));
        let decay = T::lit(1.0 - lr * c.weight_decay);
        let (lr_t, eps) = (T::lit(lr), T::lit(c.eps));
        let (bc1, bc2) = (T::lit(bc1), T::lit(bc2));
        let ids: Vec<_> = store.ids().collect();
        for id in ids {
            let i = id.index();
            let entry = store.entry_mut(id);
            if entry.kind != ParamKind::Trainable {
                continue;
            }
            let (m, v) = (self.m[i].data_mut(), self.v[i].data_mut());
            let g = entry.grad.data();
            let w = entry.value.data_mut();
            for j in 0..w.len() {
                m[j] = b1 * m[j] + (T::one() - b1) * g[j];
                v[j] = b2 * v[j] + (T::one() - b2) * g[j] * g[j];
                let mh = m[j] / bc1;
                let vh = v[j] / bc2;
                w[j] = w[j] * decay - lr_t * mh / (vh.sqrt() + eps);
            }
        }
        Ok(())
    }
}

/// Linear warmup to `peak`, then cosine decay to zero at `total`.
pub fn cosine_warmup_lr(step: usize, warmup: usize, total: usize, peak: f64) -> f64 {
    if step < warmup {
        return peak * step as f64 / warmup as f64;
    }
    if total <= warmup {
        return peak;
    }
    let progress = ((step - warmup) as f64 / (total - warmup) as f64).min(1.0);
    0.5 * peak * (1.0 + (std::f64::consts::PI * progress).cos())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_landmarks() {
        assert_eq!(cosine_warmup_lr(0, 10, 100, 1e-4), 0.0);
        assert_eq!(cosine_warmup_lr(10, 10, 100, 1e-4), 1e-4);
        assert!((cosine_warmup_lr(55, 10, 100, 1e-4) - 5e-5).abs() < 1e-18);
        assert!(cosine_warmup_lr(100, 10, 100, 1e-4).abs() < 1e-20);
    }

    #[test]
    fn single_step_update() {
        let mut store = ParamStore::<f64>::new();
        let id = store.add("w", Tensor::full([1, 1, 1, 1, 1], 1.0), ParamKind::Trainable).unwrap();
        store.entry_mut(id).grad = Tensor::full([1, 1, 1, 1, 1], 0.5);
        let mut opt = AdamW::new(&store, AdamWConfig::default());
        opt.step(&mut store, 1e-4).unwrap();
        let want = 1.0 * (1.0 - 1e-4 * 1e-5) - 1e-4 * 0.5 / (0.5 + 1e-8);
        assert!((store.value(id).item() - want).abs() < 1e-15);
        assert!((store.value(id).item() - 0.9999).abs() < 2e-9);
    }
}
