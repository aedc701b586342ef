use serde::{Deserialize, Serialize};

use super::{Real, Tensor};
use crate::error::{Error, Result};

/// Adam hyperparameters. Weight decay is decoupled (applied directly to the
/// parameter, scaled by the learning rate).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }
}

/// Per-parameter moment estimates.
#[derive(Debug, Clone)]
pub struct AdamState<T = f32> {
    pub m: Vec<Vec<T>>,
    pub v: Vec<Vec<T>>,
    pub step: u64,
}

impl<T: Real> AdamState<T> {
    pub fn new(params: &[Tensor<T>]) -> Self {
        Self {
            m: params.iter().map(|p| vec![T::zero(); p.numel()]).collect(),
            v: params.iter().map(|p| vec![T::zero(); p.numel()]).collect(),
            step: 0,
        }
    }
}

/// Adam optimizer bound to a fixed parameter list.
#[derive(Debug, Clone)]
pub struct Adam<T = f32> {
    pub config: AdamConfig,
    pub state: AdamState<T>,
}

impl<T: Real> Adam<T> {
    pub fn new(params: &[Tensor<T>], config: AdamConfig) -> Self {
        Self {
            config,
            state: AdamState::new(params),
        }
    }

    /// Applies one update using each tensor's gradient slot. Tensors without
    /// a gradient are left untouched, but the step counter still advances.
    pub fn step(&mut self, params: &mut [Tensor<T>], lr: f64) -> Result<()> {
        if !(lr >= 0.0) {
            return Err(Error::config(format!("learning rate must be >= 0, got {lr}")));
        }
        if params.len() != self.state.m.len() {
            return Err(Error::config(format!(
                "optimizer tracks {} tensors, got {}",
                self.state.m.len(),
                params.len()
            )));
        }
        for (i, p) in params.iter().enumerate() {
            if p.numel() != self.state.m[i].len() {
                return Err(Error::config(format!(
                    "optimizer slot {i} has {} elements, tensor has {}",
                    self.state.m[i].len(),
                    p.numel()
                )));
            }
        }
        self.state.step += 1;
        let cfg = self.config;
        let t = self.state.step as i32;
        let bc1 = T::of(1.0 - cfg.beta1.powi(t));
        let bc2 = T::of(1.0 - cfg.beta2.powi(t));
        let (b1, b2) = (T::of(cfg.beta1), T::of(cfg.beta2));
        let (one_b1, one_b2) = (T::of(1.0 - cfg.beta1), T::of(1.0 - cfg.beta2));
        let (lr, eps, wd) = (T::of(lr), T::of(cfg.eps), T::of(cfg.weight_decay));
        for (i, p) in params.iter_mut().enumerate() {
            let Some(g) = p.take_grad() else { continue };
            let m = &mut self.state.m[i];
            let v = &mut self.state.v[i];
            let data = p.data_mut();
            for j in 0..data.len() {
                m[j] = b1 * m[j] + one_b1 * g[j];
                v[j] = b2 * v[j] + one_b2 * g[j] * g[j];
                let mhat = m[j] / bc1;
                let vhat = v[j] / bc2;
                data[j] -= lr * (mhat / (vhat.sqrt() + eps) + wd * data[j]);
            }
            p.set_grad(g)?;
        }
        Ok(())
    }
}

/// Linear warmup to `peak_lr`, then cosine decay to `floor_frac * peak_lr`
/// at `total_steps`.
pub fn cosine_lr(step: u64, total_steps: u64, warmup_frac: f64, floor_frac: f64, peak_lr: f64) -> Result<f64> {
    if total_steps == 0 {
        return Err(Error::config("cosine_lr: total_steps must be positive"));
    }
    if !(0.0..1.0).contains(&warmup_frac) || !(0.0..=1.0).contains(&floor_frac) {
        return Err(Error::config(format!(
            "cosine_lr: warmup_frac {warmup_frac} must be in [0,1), floor_frac {floor_frac} in [0,1]"
        )));
    }
    if step > total_steps {
        return Err(Error::config(format!("cosine_lr: step {step} beyond {total_steps}")));
    }
    let warmup = warmup_frac * total_steps as f64;
    let s = step as f64;
    if s < warmup {
        return Ok(peak_lr * s / warmup);
    }
    let progress = (s - warmup) / (total_steps as f64 - warmup);
    let floor = floor_frac * peak_lr;
    Ok(floor + (peak_lr - floor) * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos()))
}
