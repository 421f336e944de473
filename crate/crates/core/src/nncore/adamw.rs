use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::params::{Gradients, ParamId, ParamStore};
use super::tensor::{Real, Tensor};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            lr: 1e-4,
            beta1: 0.95,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-6,
        }
    }
}

/// Decoupled weight decay Adam. Moments are created lazily on the first
/// gradient a parameter receives.
#[derive(Debug, Clone)]
pub struct AdamW<T> {
    pub config: AdamWConfig,
    step: u64,
    m: BTreeMap<ParamId, Vec<T>>,
    v: BTreeMap<ParamId, Vec<T>>,
    lr_scale: BTreeMap<ParamId, f64>,
}

impl<T: Real> AdamW<T> {
    pub fn new(config: AdamWConfig) -> Self {
        AdamW {
            config,
            step: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
            lr_scale: BTreeMap::new(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// Multiplies the learning rate of every parameter named with `prefix`.
    pub fn set_lr_scale_prefix(&mut self, store: &ParamStore<T>, prefix: &str, scale: f64) {
        for id in store.ids() {
            if store.name(id).starts_with(prefix) {
                self.lr_scale.insert(id, scale);
            }
        }
    }

    pub fn step(&mut self, store: &mut ParamStore<T>, grads: &Gradients<T>) -> Result<()> {
        for id in store.ids() {
            if let Some(g) = grads.get(id) {
                if g.shape() != store.get(id).shape() {
                    return Err(Error::shape(
                        "adamw",
                        format!(
                            "gradient {:?} for parameter `{}` {:?}",
                            g.shape(),
                            store.name(id),
                            store.get(id).shape()
                        ),
                    ));
                }
                if !g.all_finite() {
                    return Err(Error::Numeric(format!(
                        "non-finite gradient for parameter `{}`",
                        store.name(id)
                    )));
                }
            }
        }
        self.step += 1;
        let c = self.config;
        let t = self.step as f64;
        let bc1 = 1.0 - c.beta1.powf(t);
        let bc2 = 1.0 - c.beta2.powf(t);
        let (b1, b2) = (T::from_f64(c.beta1), T::from_f64(c.beta2));
        let (ob1, ob2) = (T::one() - b1, T::one() - b2);
        for id in store.ids() {
            if store.is_frozen(id) {
                continue;
            }
            let Some(g) = grads.get(id) else {
                continue;
            };
            let lr = c.lr * self.lr_scale.get(&id).copied().unwrap_or(1.0);
            let n = g.len();
            let m = self.m.entry(id).or_insert_with(|| vec![T::zero(); n]);
            let v = self.v.entry(id).or_insert_with(|| vec![T::zero(); n]);
            let decay = T::from_f64(1.0 - lr * c.weight_decay);
            let step_size = T::from_f64(lr / bc1);
            let inv_bc2 = T::from_f64(1.0 / bc2);
            let eps = T::from_f64(c.eps);
            let w = store.get_mut(id).data_mut();
            for i in 0..n {
                let gi = g.data()[i];
                m[i] = flush(b1 * m[i] + ob1 * gi);
                v[i] = flush(b2 * v[i] + ob2 * gi * gi);
                let denom = (v[i] * inv_bc2).sqrt() + eps;
                w[i] = w[i] * decay - step_size * m[i] / denom;
            }
        }
        Ok(())
    }

    /// `(id, m, v)` for every parameter with state.
    pub fn moments(&self) -> impl Iterator<Item = (ParamId, &[T], &[T])> {
        self.m
            .iter()
            .map(|(id, m)| (*id, m.as_slice(), self.v[id].as_slice()))
    }

    pub fn restore(
        &mut self,
        store: &ParamStore<T>,
        step: u64,
        moments: Vec<(ParamId, Tensor<T>, Tensor<T>)>,
    ) -> Result<()> {
        self.m.clear();
        self.v.clear();
        for (id, m, v) in moments {
            let n = store.get(id).len();
            if m.len() != n || v.len() != n {
                return Err(Error::ShapeMismatch(format!(
                    "optimizer state for `{}` has {} / {} values, parameter has {n}",
                    store.name(id),
                    m.len(),
                    v.len()
                )));
            }
            self.m.insert(id, m.into_data());
            self.v.insert(id, v.into_data());
        }
        self.step = step;
        Ok(())
    }
}

/// Subnormal moments are zeroed. A parameter whose gradient stays at zero
/// (a dead ReLU unit) would otherwise decay its moments into the subnormal
/// range, where every later update runs on the slow path.
#[inline]
fn flush<T: Real>(x: T) -> T {
    if x.abs() < T::min_positive_value() {
        T::zero()
    } else {
        x
    }
}

/// Cosine decay from `base` at epoch 1 towards zero after `epochs`.
pub fn cosine_lr(base: f64, epoch: usize, epochs: usize) -> f64 {
    let t = epoch.saturating_sub(1) as f64 / epochs.max(1) as f64;
    base * 0.5 * (1.0 + (std::f64::consts::PI * t).cos())
}
