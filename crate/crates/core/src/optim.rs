//! Adam with a cosine-annealed learning rate.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Cosine annealing from `initial` down to `minimum` over `total_steps`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CosineSchedule {
    pub initial: f64,
    pub minimum: f64,
    pub total_steps: usize,
}

impl Default for CosineSchedule {
    fn default() -> Self {
        Self { initial: 2e-4, minimum: 1e-7, total_steps: 200_000 }
    }
}

impl CosineSchedule {
    /// Rate used by the update with zero-based index `step`. Equals
    /// `initial` at step 0 and `minimum` from `total_steps` on.
    pub fn rate(&self, step: usize) -> f64 {
        if self.total_steps == 0 || step >= self.total_steps {
            return self.minimum;
        }
        let frac = step as f64 / self.total_steps as f64;
        self.minimum + 0.5 * (self.initial - self.minimum) * (1.0 + (std::f64::consts::PI * frac).cos())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// Per-parameter moment buffers plus the update counter.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub config: AdamConfig,
    pub schedule: CosineSchedule,
    /// Number of updates applied so far.
    pub step: usize,
    pub first_moment: BTreeMap<String, Tensor>,
    pub second_moment: BTreeMap<String, Tensor>,
}

impl Adam {
    pub fn new(config: AdamConfig, schedule: CosineSchedule) -> Self {
        Self { config, schedule, step: 0, first_moment: BTreeMap::new(), second_moment: BTreeMap::new() }
    }

    pub fn current_rate(&self) -> f64 {
        self.schedule.rate(self.step)
    }

    /// Applies one bias-corrected update to every parameter that has a
    /// gradient. Non-finite gradients abort the step before anything is
    /// modified.
    pub fn step(&mut self, params: &mut BTreeMap<String, Tensor>, grads: &BTreeMap<String, Tensor>) -> Result<()> {
        for (name, g) in grads {
            let p =
                params.get(name).ok_or_else(|| Error::invalid("adam_step", format!("gradient for unknown parameter {name}")))?;
            if p.shape() != g.shape() {
                return Err(Error::shape("adam_step", format!("{name}: parameter {:?} vs gradient {:?}", p.shape(), g.shape())));
            }
            if !g.all_finite() {
                return Err(Error::NonFinite(format!("gradient of {name}")));
            }
        }
        let lr = self.current_rate();
        let AdamConfig { beta1, beta2, eps } = self.config;
        let t = (self.step + 1) as i32;
        let bc1 = 1.0 - beta1.powi(t);
        let bc2 = 1.0 - beta2.powi(t);
        for (name, g) in grads {
            let p = params.get_mut(name).expect("checked above");
            let m = self.first_moment.entry(name.clone()).or_insert_with(|| Tensor::zeros(g.shape()));
            let v = self.second_moment.entry(name.clone()).or_insert_with(|| Tensor::zeros(g.shape()));
            for (((pi, &gi), mi), vi) in p.data_mut().iter_mut().zip(g.data()).zip(m.data_mut()).zip(v.data_mut()) {
                *mi = beta1 * *mi + (1.0 - beta1) * gi;
                *vi = beta2 * *vi + (1.0 - beta2) * gi * gi;
                let mhat = *mi / bc1;
                let vhat = *vi / bc2;
                *pi -= lr * mhat / (vhat.sqrt() + eps);
            }
        }
        self.step += 1;
        Ok(())
    }
}
