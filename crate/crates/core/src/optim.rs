//! Optimizers and the learning-rate schedule: layer-wise adaptive rate
//! scaling (LARS) with momentum for pretraining, bias-corrected Adam for
//! downstream training, and linear warmup followed by cosine decay.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::ParamKind;
use crate::tensor::Array;

/// LARS hyperparameters. Weights get trust-ratio adaptation and weight
/// decay; biases and batch-norm parameters are excluded from both and train
/// at their own base rate.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct LarsConfig {
    pub base_lr_weights: f64,
    pub base_lr_biases: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub trust_coefficient: f64,
}

impl Default for LarsConfig {
    fn default() -> Self {
        LarsConfig {
            base_lr_weights: 0.2,
            base_lr_biases: 0.0048,
            momentum: 0.9,
            weight_decay: 1e-6,
            trust_coefficient: 0.001,
        }
    }
}

impl LarsConfig {
    pub fn validate(&self) -> Result<()> {
        if self.base_lr_weights <= 0.0
            || self.base_lr_biases <= 0.0
            || self.trust_coefficient <= 0.0
        {
            return Err(Error::Config("LARS rates must be positive".into()));
        }
        Ok(())
    }

    /// Effective base rate scaling: batch_size / 256.
    pub fn batch_scale(batch_size: usize) -> f64 {
        batch_size as f64 / 256.0
    }
}

/// LARS with momentum. Buffers align with the caller's parameter order,
/// which must stay fixed across steps.
#[derive(Debug, Clone, Default)]
pub struct Lars {
    buffers: Vec<Vec<f64>>,
    cfg: LarsConfig,
}

impl Lars {
    pub fn new(cfg: LarsConfig) -> Self {
        Lars {
            buffers: Vec::new(),
            cfg,
        }
    }

    pub fn config(&self) -> &LarsConfig {
        &self.cfg
    }

    /// Momentum buffers, aligned with the parameter order of `step`.
    pub fn buffers(&self) -> &[Vec<f64>] {
        &self.buffers
    }

    pub fn set_buffers(&mut self, buffers: Vec<Vec<f64>>) {
        self.buffers = buffers;
    }

    /// One update. `lr_weights` / `lr_biases` are the schedule-resolved
    /// rates for this step (base rate x batch scale x schedule value).
    ///
    /// Adapted groups: `local = trust * ||w|| / (||g|| + wd * ||w||)` when
    /// both norms are positive (1 otherwise), then
    /// `m <- momentum * m + local * lr * (g + wd * w)` and `w <- w - m`.
    /// Excluded groups skip adaptation and decay: `m <- momentum * m + lr * g`.
    pub fn step(
        &mut self,
        params: &mut [(&'static str, &mut Array, ParamKind)],
        grads: &[Array],
        lr_weights: f64,
        lr_biases: f64,
    ) -> Result<()> {
        if params.len() != grads.len() {
            return Err(Error::ShapeMismatch {
                context: "lars_step",
                expected: format!("{} gradients", params.len()),
                actual: format!("{}", grads.len()),
            });
        }
        if self.buffers.is_empty() {
            self.buffers = params
                .iter()
                .map(|(_, p, _)| vec![0.0; p.numel()])
                .collect();
        }
        let cfg = &self.cfg;
        for (idx, ((name, param, kind), grad)) in params.iter_mut().zip(grads.iter()).enumerate() {
            if !grad.all_finite() {
                return Err(Error::Numerical(format!(
                    "non-finite gradient for {name}, aborting step"
                )));
            }
            let buffer = &mut self.buffers[idx];
            if buffer.len() != param.numel() {
                return Err(Error::ShapeMismatch {
                    context: "lars_step",
                    expected: format!("buffer of {} for {name}", param.numel()),
                    actual: format!("{}", buffer.len()),
                });
            }
            match kind {
                ParamKind::Weight => {
                    let w_norm = param.norm();
                    let g_norm = grad.norm();
                    if g_norm == 0.0 {
                        // zero gradient: momentum coasts, no decay is applied,
                        // so an idle parameter stays put
                        for (m, w) in buffer.iter_mut().zip(param.data_mut().iter_mut()) {
                            *m *= cfg.momentum;
                            *w -= *m;
                        }
                        continue;
                    }
                    let local = if w_norm > 0.0 {
                        cfg.trust_coefficient * w_norm / (g_norm + cfg.weight_decay * w_norm)
                    } else {
                        1.0
                    };
                    let rate = local * lr_weights;
                    for ((m, w), &g) in buffer
                        .iter_mut()
                        .zip(param.data_mut().iter_mut())
                        .zip(grad.data())
                    {
                        *m = cfg.momentum * *m + rate * (g + cfg.weight_decay * *w);
                        *w -= *m;
                    }
                }
                ParamKind::Bias => {
                    for ((m, w), &g) in buffer
                        .iter_mut()
                        .zip(param.data_mut().iter_mut())
                        .zip(grad.data())
                    {
                        *m = cfg.momentum * *m + lr_biases * g;
                        *w -= *m;
                    }
                }
            }
        }
        Ok(())
    }
}

/// Linear warmup then cosine decay down to `base / 1000` by default.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct ScheduleConfig {
    pub warmup_epochs: usize,
    pub total_epochs: usize,
    pub final_lr_fraction: f64,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        ScheduleConfig {
            warmup_epochs: 10,
            total_epochs: 100,
            final_lr_fraction: 1e-3,
        }
    }
}

impl ScheduleConfig {
    pub fn validate(&self) -> Result<()> {
        if self.warmup_epochs >= self.total_epochs {
            return Err(Error::Config(format!(
                "warmup ({}) must be shorter than the run ({} epochs)",
                self.warmup_epochs, self.total_epochs
            )));
        }
        Ok(())
    }
}

/// Learning rate at a global step. Warmup ramps linearly from 0 to
/// `base_lr` over `warmup_epochs`; the remainder decays along a half cosine
/// from `base_lr` to `base_lr * final_lr_fraction`, reached at the final
/// step boundary `total_epochs * steps_per_epoch`.
pub fn lr_at(step: usize, steps_per_epoch: usize, cfg: &ScheduleConfig, base_lr: f64) -> f64 {
    let warmup_steps = cfg.warmup_epochs * steps_per_epoch;
    let total_steps = cfg.total_epochs * steps_per_epoch;
    if step < warmup_steps {
        return base_lr * step as f64 / warmup_steps as f64;
    }
    let final_lr = base_lr * cfg.final_lr_fraction;
    if step >= total_steps {
        return final_lr;
    }
    let progress = (step - warmup_steps) as f64 / (total_steps - warmup_steps) as f64;
    final_lr + (base_lr - final_lr) * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
}

/// Adam hyperparameters for downstream training.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            batch_size: 64,
            max_epochs: 100,
        }
    }
}

impl AdamConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0 < self.beta1 && self.beta1 < 1.0 && 0.0 < self.beta2 && self.beta2 < 1.0) {
            return Err(Error::Config(format!(
                "Adam betas must lie in (0, 1), got ({}, {})",
                self.beta1, self.beta2
            )));
        }
        if self.lr <= 0.0 || self.batch_size == 0 {
            return Err(Error::Config("Adam lr and batch size must be positive".into()));
        }
        Ok(())
    }
}

/// Textbook Adam with bias correction.
#[derive(Debug, Clone, Default)]
pub struct Adam {
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: u64,
    cfg: AdamConfig,
}

impl Adam {
    pub fn new(cfg: AdamConfig) -> Self {
        Adam {
            m: Vec::new(),
            v: Vec::new(),
            t: 0,
            cfg,
        }
    }

    pub fn config(&self) -> &AdamConfig {
        &self.cfg
    }

    pub fn step(
        &mut self,
        params: &mut [(&'static str, &mut Array, ParamKind)],
        grads: &[Array],
    ) -> Result<()> {
        if params.len() != grads.len() {
            return Err(Error::ShapeMismatch {
                context: "adam_step",
                expected: format!("{} gradients", params.len()),
                actual: format!("{}", grads.len()),
            });
        }
        if self.m.is_empty() {
            self.m = params.iter().map(|(_, p, _)| vec![0.0; p.numel()]).collect();
            self.v = params.iter().map(|(_, p, _)| vec![0.0; p.numel()]).collect();
        }
        self.t += 1;
        let t = self.t as i32;
        let cfg = &self.cfg;
        let bc1 = 1.0 - cfg.beta1.powi(t);
        let bc2 = 1.0 - cfg.beta2.powi(t);
        for (idx, ((name, param, _), grad)) in params.iter_mut().zip(grads.iter()).enumerate() {
            if !grad.all_finite() {
                return Err(Error::Numerical(format!(
                    "non-finite gradient for {name}, aborting step"
                )));
            }
            let m = &mut self.m[idx];
            let v = &mut self.v[idx];
            for (((mi, vi), w), &g) in m
                .iter_mut()
                .zip(v.iter_mut())
                .zip(param.data_mut().iter_mut())
                .zip(grad.data())
            {
                *mi = cfg.beta1 * *mi + (1.0 - cfg.beta1) * g;
                *vi = cfg.beta2 * *vi + (1.0 - cfg.beta2) * g * g;
                let m_hat = *mi / bc1;
                let v_hat = *vi / bc2;
                *w -= cfg.lr * m_hat / (v_hat.sqrt() + cfg.eps);
            }
        }
        Ok(())
    }
}
