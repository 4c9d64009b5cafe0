//! BERT-style Adam with warmup and linear decay.
//!
//! Per coordinate, with gradient `g` after optional global-norm clipping:
//!
//! ```text
//! m ← β1·m + (1−β1)·g
//! v ← β2·v + (1−β2)·g²
//! u ← m / (√v + ε) + wd·p      (wd only for weight matrices and embeddings)
//! p ← p − lr(t)·u
//! ```
//!
//! There is no bias correction. `lr(t)` rises linearly over the first
//! `warmup · total_steps` steps and then decays linearly to zero.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, usage, Result};
use crate::model::ParamSet;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimConfig {
    pub lr: f64,
    /// Fraction of `total_steps` spent warming up.
    pub warmup: f64,
    pub total_steps: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Clip the global gradient norm to this value.
    pub max_grad_norm: Option<f64>,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            warmup: 0.1,
            total_steps: 1000,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-6,
            weight_decay: 0.01,
            max_grad_norm: Some(1.0),
        }
    }
}

impl OptimConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return invalid(format!("learning rate {} must be positive", self.lr));
        }
        if !(0.0..1.0).contains(&self.warmup) {
            return invalid(format!("warmup {} outside [0, 1)", self.warmup));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return invalid("betas must lie in [0, 1)");
        }
        if self.total_steps == 0 {
            return invalid("total_steps must be positive");
        }
        Ok(())
    }

    /// Learning rate for the update with 0-based index `step`.
    pub fn lr_at(&self, step: usize) -> f64 {
        let total = self.total_steps as f64;
        let warm = self.warmup * total;
        let t = step as f64 + 1.0;
        let scale = if t <= warm {
            t / warm
        } else {
            ((total - t) / (total - warm)).max(0.0)
        };
        self.lr * scale
    }
}

/// Weight decay skips biases and LayerNorm parameters.
pub fn decays(tensor: &str) -> bool {
    let last = tensor.rsplit('.').next().unwrap_or(tensor);
    !(last.starts_with('b') || last.starts_with("ln"))
}

#[derive(Debug, Clone)]
pub struct BertAdam {
    config: OptimConfig,
    step: usize,
    m: Vec<f64>,
    v: Vec<f64>,
}

impl BertAdam {
    pub fn new(config: OptimConfig, num_params: usize) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            config,
            step: 0,
            m: vec![0.0; num_params],
            v: vec![0.0; num_params],
        })
    }

    pub fn config(&self) -> &OptimConfig {
        &self.config
    }

    /// Updates applied so far.
    pub fn steps(&self) -> usize {
        self.step
    }

    pub fn current_lr(&self) -> f64 {
        self.config.lr_at(self.step)
    }

    fn clip_scale(&self, sq_norm: f64) -> f64 {
        match self.config.max_grad_norm {
            Some(max) if sq_norm.sqrt() > max => max / sq_norm.sqrt(),
            _ => 1.0,
        }
    }

    fn update(&mut self, offset: usize, p: &mut [f64], g: &[f64], scale: f64, decay: bool, lr: f64) {
        let c = &self.config;
        let wd = if decay { c.weight_decay } else { 0.0 };
        for (i, (p, &g)) in p.iter_mut().zip(g).enumerate() {
            let g = g * scale;
            let m = &mut self.m[offset + i];
            let v = &mut self.v[offset + i];
            *m = c.beta1 * *m + (1.0 - c.beta1) * g;
            *v = c.beta2 * *v + (1.0 - c.beta2) * g * g;
            *p -= lr * (*m / (v.sqrt() + c.eps) + wd * *p);
        }
    }

    /// One update of every tensor in `params`.
    pub fn step(&mut self, params: &mut ParamSet, grads: &ParamSet) -> Result<()> {
        let flat = grads.flatten();
        if flat.len() != self.m.len() || params.num_params() != flat.len() {
            return usage(format!(
                "optimizer sized for {} parameters, got {} / {}",
                self.m.len(),
                params.num_params(),
                flat.len()
            ));
        }
        let scale = self.clip_scale(flat.iter().map(|g| g * g).sum());
        let lr = self.current_lr();
        let mut off = 0;
        params.for_each_tensor_mut(|name, p| {
            let len = p.len();
            self.update(off, p, &flat[off..off + len], scale, decays(name), lr);
            off += len;
        });
        self.step += 1;
        Ok(())
    }

    /// One update of a flat parameter vector.
    pub fn step_flat(&mut self, params: &mut [f64], grads: &[f64], decay: bool) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != params.len() {
            return usage("flat parameter and gradient lengths do not match the optimizer");
        }
        let scale = self.clip_scale(grads.iter().map(|g| g * g).sum());
        let lr = self.current_lr();
        self.update(0, params, grads, scale, decay, lr);
        self.step += 1;
        Ok(())
    }
}
