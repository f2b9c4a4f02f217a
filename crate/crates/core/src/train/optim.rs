use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use super::{Result, TrainError};
use crate::model::ModelWeights;
use crate::tensor::Tensor;

/// Linear warm-up from 0 to `peak`, then cosine decay to 0 at `total`.
pub fn lr_schedule(step: u64, warmup: u64, total: u64, peak: f64) -> f64 {
    let step = step.min(total);
    if step < warmup {
        return peak * step as f64 / warmup as f64;
    }
    if total == warmup {
        return peak;
    }
    let progress = (step - warmup) as f64 / (total - warmup) as f64;
    (peak * 0.5 * (1.0 + (PI * progress).cos())).max(0.0)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Global gradient-norm clip; 0 disables clipping.
    pub clip_norm: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            beta1: 0.9,
            beta2: 0.95,
            eps: 1e-8,
            weight_decay: 0.01,
            clip_norm: 1.0,
        }
    }
}

impl AdamWConfig {
    pub fn validate(&self) -> Result<()> {
        let unit = |b: f64| (0.0..1.0).contains(&b);
        if !unit(self.beta1) || !unit(self.beta2) {
            return Err(TrainError::Config("AdamW betas must lie in [0, 1)".into()));
        }
        if !(self.eps > 0.0) || !(self.weight_decay >= 0.0) || !(self.clip_norm >= 0.0) {
            return Err(TrainError::Config(
                "AdamW eps must be positive; weight_decay and clip_norm nonnegative".into(),
            ));
        }
        Ok(())
    }
}

/// Weight decay applies to matrices and conv kernels only; gains, biases
/// and register tokens are left alone.
pub fn decays(name: &str, t: &Tensor<f32>) -> bool {
    t.rank() >= 2 && name != "registers"
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdamW {
    pub config: AdamWConfig,
    /// Number of updates taken so far.
    pub step: u64,
    pub m: Vec<Tensor<f32>>,
    pub v: Vec<Tensor<f32>>,
}

impl AdamW {
    pub fn new(config: AdamWConfig, weights: &ModelWeights<f32>) -> Self {
        let zeros: Vec<Tensor<f32>> = weights
            .iter()
            .map(|(_, t)| Tensor::zeros(t.shape()))
            .collect();
        AdamW {
            config,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    /// Applies one update and returns the gradient norm before clipping.
    pub fn update(
        &mut self,
        weights: &mut ModelWeights<f32>,
        grads: &[Vec<f32>],
        lr: f64,
    ) -> Result<f64> {
        if grads.len() != weights.len() || self.m.len() != weights.len() {
            return Err(TrainError::Config(format!(
                "{} gradients for {} tensors",
                grads.len(),
                weights.len()
            )));
        }
        let norm = grads
            .iter()
            .flat_map(|g| g.iter())
            .map(|&g| (g as f64) * (g as f64))
            .sum::<f64>()
            .sqrt();
        if !norm.is_finite() {
            return Err(TrainError::Numerical(format!("gradient norm is {norm}")));
        }
        let c = &self.config;
        let scale = if c.clip_norm > 0.0 && norm > c.clip_norm {
            c.clip_norm / norm
        } else {
            1.0
        };
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - c.beta1.powi(t);
        let bc2 = 1.0 - c.beta2.powi(t);
        let (b1, b2) = (c.beta1 as f32, c.beta2 as f32);
        let step_size = (lr / bc1) as f32;
        let inv_bc2 = (1.0 / bc2) as f32;
        let eps = c.eps as f32;
        let decay = (lr * c.weight_decay) as f32;
        let scale = scale as f32;
        for (k, (name, w)) in weights.iter_mut().enumerate() {
            let wd = if decays(name, w) { decay } else { 0.0 };
            let (m, v) = (self.m[k].data_mut(), self.v[k].data_mut());
            for (i, p) in w.data_mut().iter_mut().enumerate() {
                let g = grads[k][i] * scale;
                m[i] = b1 * m[i] + (1.0 - b1) * g;
                v[i] = b2 * v[i] + (1.0 - b2) * g * g;
                let denom = (v[i] * inv_bc2).sqrt() + eps;
                *p -= wd * *p + step_size * m[i] / denom;
            }
        }
        Ok(norm)
    }
}
