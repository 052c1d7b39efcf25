//! One-cycle learning-rate schedule and the Adam update rule.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Cosine one-cycle schedule: warm up from `max_lr / initial_div` to
/// `max_lr`, then anneal to `max_lr * final_lr_fraction`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OneCycleSchedule {
    pub max_lr: f64,
    pub total_steps: usize,
    pub warmup_fraction: f64,
    pub final_lr_fraction: f64,
    pub initial_div: f64,
}

impl OneCycleSchedule {
    pub const DEFAULT_MAX_LR: f64 = 3e-5;

    pub fn new(max_lr: f64, total_steps: usize) -> Result<Self> {
        Self {
            max_lr,
            total_steps,
            warmup_fraction: 0.3,
            final_lr_fraction: 1e-2,
            initial_div: 25.0,
        }
        .validated()
    }

    pub fn validated(self) -> Result<Self> {
        if self.total_steps == 0 {
            return Err(Error::Schedule("total_steps must be positive".into()));
        }
        if !(self.warmup_fraction > 0.0 && self.warmup_fraction < 1.0) {
            return Err(Error::Schedule(format!(
                "warmup_fraction {} outside (0,1)",
                self.warmup_fraction
            )));
        }
        if !(self.max_lr > 0.0 && self.max_lr.is_finite()) {
            return Err(Error::Schedule(format!("max_lr {} must be positive", self.max_lr)));
        }
        if !(self.final_lr_fraction > 0.0 && self.final_lr_fraction <= 1.0) {
            return Err(Error::Schedule(format!(
                "final_lr_fraction {} outside (0,1]",
                self.final_lr_fraction
            )));
        }
        if self.initial_div <= 1.0 {
            return Err(Error::Schedule("initial_div must exceed 1".into()));
        }
        Ok(self)
    }

    /// Step at which the peak learning rate is reached (at least 1).
    pub fn warmup_end(&self) -> usize {
        ((self.warmup_fraction * self.total_steps as f64).floor() as usize)
            .clamp(1, self.total_steps)
    }

    pub fn initial_lr(&self) -> f64 {
        self.max_lr / self.initial_div
    }

    pub fn final_lr(&self) -> f64 {
        self.max_lr * self.final_lr_fraction
    }

    /// Learning rate at step `t ∈ [0, total_steps]`; clamped beyond.
    pub fn lr(&self, t: usize) -> f64 {
        let we = self.warmup_end();
        let t = t.min(self.total_steps);
        if t == self.total_steps && t > we {
            return self.final_lr();
        }
        if t <= we {
            let q = t as f64 / we as f64;
            let span = self.max_lr - self.initial_lr();
            return self.max_lr - span * (1.0 + (std::f64::consts::PI * q).cos()) / 2.0;
        }
        let p = (t - we) as f64 / (self.total_steps - we) as f64;
        let span = self.max_lr - self.final_lr();
        self.max_lr - span * (1.0 - (std::f64::consts::PI * p).cos()) / 2.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone)]
struct Moments<T> {
    m: Vec<T>,
    v: Vec<T>,
}

/// Adam without weight decay or clipping. Moments are kept per parameter
/// name; frozen parameters are skipped entirely.
#[derive(Debug, Clone)]
pub struct Adam<T> {
    pub config: AdamConfig,
    moments: BTreeMap<String, Moments<T>>,
    updates: u64,
}

impl<T: Scalar> Adam<T> {
    pub fn new(config: AdamConfig) -> Self {
        Self {
            config,
            moments: BTreeMap::new(),
            updates: 0,
        }
    }

    pub fn updates(&self) -> u64 {
        self.updates
    }

    /// Applies one update at `lr = schedule.lr(t)` using the accumulated
    /// gradients, then clears them.
    pub fn step(
        &mut self,
        store: &mut ParamStore<T>,
        schedule: &OneCycleSchedule,
        t: usize,
    ) -> Result<f64> {
        if t >= schedule.total_steps {
            return Err(Error::Schedule(format!(
                "step {t} beyond total_steps {}",
                schedule.total_steps
            )));
        }
        let lr = schedule.lr(t);
        self.apply(store, lr)?;
        Ok(lr)
    }

    /// Adam update at an explicit learning rate.
    pub fn apply(&mut self, store: &mut ParamStore<T>, lr: f64) -> Result<()> {
        self.updates += 1;
        let n = self.updates as i32;
        let AdamConfig { beta1, beta2, eps } = self.config;
        let bc1 = 1.0 - beta1.powi(n);
        let bc2 = 1.0 - beta2.powi(n);
        let (b1, b2) = (T::from_f64_lossy(beta1), T::from_f64_lossy(beta2));
        let one = T::one();
        let step_size = T::from_f64_lossy(lr / bc1);
        let inv_bc2 = T::from_f64_lossy(1.0 / bc2);
        let eps = T::from_f64_lossy(eps);
        let frozen: Vec<String> = store.frozen_prefixes().to_vec();

        for (name, param) in store.iter_mut() {
            if frozen.iter().any(|p| name.starts_with(p.as_str())) {
                continue;
            }
            let Some(grad) = param.grad.take() else { continue };
            if !grad.is_finite() {
                return Err(Error::NonFinite(format!("gradient of {name}")));
            }
            let mom = self.moments.entry(name.clone()).or_insert_with(|| Moments {
                m: vec![T::zero(); grad.len()],
                v: vec![T::zero(); grad.len()],
            });
            let value: &mut Tensor<T> = std::sync::Arc::make_mut(&mut param.value);
            for (i, (w, &g)) in value.data_mut().iter_mut().zip(grad.data()).enumerate() {
                let m = b1 * mom.m[i] + (one - b1) * g;
                let v = b2 * mom.v[i] + (one - b2) * g * g;
                mom.m[i] = m;
                mom.v[i] = v;
                *w -= step_size * m / ((v * inv_bc2).sqrt() + eps);
            }
        }
        Ok(())
    }
}
