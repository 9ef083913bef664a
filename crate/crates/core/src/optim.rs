//! Adam with decoupled weight decay (the BERT `AdamWeightDecay` form, plus
//! bias correction) and a linear warmup / linear decay learning-rate schedule.

use log::warn;
use serde::{Deserialize, Serialize};

use crate::params::ParamStore;
use crate::tensor::Float;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub warmup_steps: u64,
    /// Rescale the gradient so its global L2 norm is at most this.
    pub clip_norm: Option<f64>,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 5e-5,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
            warmup_steps: 10_000,
            clip_norm: None,
        }
    }
}

/// Learning-rate multiplier at step `t` (1-based): rises linearly to 1 at
/// `warmup`, then falls linearly to 0 at `total`.
pub fn schedule_factor(t: u64, warmup: u64, total: u64) -> f64 {
    let up = if warmup == 0 { 1.0 } else { t as f64 / warmup as f64 };
    let down = if t >= total {
        0.0
    } else if total <= warmup {
        1.0
    } else {
        ((total - t) as f64 / (total - warmup) as f64).max(0.0)
    };
    up.min(down).max(0.0)
}

/// Global L2 norm of all gradients held in `params`.
pub fn grad_norm<T: Float>(params: &ParamStore<T>) -> f64 {
    params
        .tensors()
        .iter()
        .filter_map(|t| t.grad())
        .flatten()
        .map(|g| g.to_f64().unwrap_or(f64::NAN).powi(2))
        .sum::<f64>()
        .sqrt()
}

#[derive(Clone, Debug)]
pub struct AdamState<T> {
    pub config: AdamConfig,
    pub total_steps: u64,
    t: u64,
    m: Vec<Vec<T>>,
    v: Vec<Vec<T>>,
}

impl<T: Float> AdamState<T> {
    pub fn new(config: AdamConfig, total_steps: u64, params: &ParamStore<T>) -> Self {
        let zeros = |p: &ParamStore<T>| p.tensors().iter().map(|t| vec![T::zero(); t.numel()]).collect();
        Self {
            config,
            total_steps,
            t: 0,
            m: zeros(params),
            v: zeros(params),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.t
    }

    /// Learning rate the next call to [`AdamState::step`] would use.
    pub fn next_lr(&self) -> f64 {
        self.config.lr * schedule_factor(self.t + 1, self.config.warmup_steps, self.total_steps)
    }

    /// Applies one update from the gradients held in `params`, then clears them.
    /// Parameters without a gradient are left untouched.
    pub fn step(&mut self, params: &mut ParamStore<T>) {
        self.t += 1;
        let lr = self.config.lr * schedule_factor(self.t, self.config.warmup_steps, self.total_steps);
        if self.t > self.total_steps {
            warn!("optimizer step {} beyond schedule end {}; update skipped", self.t, self.total_steps);
        }
        if lr > 0.0 {
            let c = &self.config;
            let (b1, b2) = (T::lit(c.beta1), T::lit(c.beta2));
            let (one_b1, one_b2) = (T::lit(1.0 - c.beta1), T::lit(1.0 - c.beta2));
            let bc1 = T::lit(1.0 - c.beta1.powf(self.t as f64));
            let bc2 = T::lit(1.0 - c.beta2.powf(self.t as f64));
            let (eps, lr_t) = (T::lit(c.eps), T::lit(lr));
            let clip = T::lit(match c.clip_norm {
                Some(max) => {
                    let norm = grad_norm(params);
                    if norm > max { max / norm } else { 1.0 }
                }
                None => 1.0,
            });
            for i in 0..params.len() {
                let wd = if params.decays(i) { T::lit(c.weight_decay) } else { T::zero() };
                let p = params.get_mut(i);
                let Some(grad) = p.grad().map(<[T]>::to_vec) else {
                    continue;
                };
                let (m, v) = (&mut self.m[i], &mut self.v[i]);
                for (j, w) in p.data_mut().iter_mut().enumerate() {
                    let g = clip * grad[j];
                    m[j] = b1 * m[j] + one_b1 * g;
                    v[j] = b2 * v[j] + one_b2 * g * g;
                    let mh = m[j] / bc1;
                    let vh = v[j] / bc2;
                    *w -= lr_t * (mh / (vh.sqrt() + eps) + wd * *w);
                }
            }
        }
        params.zero_grads();
    }
}
