//! AdamW with decoupled weight decay and a cosine learning-rate schedule.

use std::collections::{BTreeMap, HashMap};
use std::f64::consts::PI;

use crate::error::Result;
use crate::params::Params;
use crate::tensor::Matrix;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Rescale the global gradient norm down to this value when exceeded.
    pub clip_norm: Option<f64>,
}

impl AdamWConfig {
    pub fn with_lr(lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
            clip_norm: Some(1.0),
        }
    }
}

/// `lr · ½(1 + cos(π · step / total))`, floored at zero after `total`.
pub fn cosine_lr(base: f64, step: usize, total: usize) -> f64 {
    if total == 0 {
        return base;
    }
    let progress = (step as f64 / total as f64).min(1.0);
    base * 0.5 * (1.0 + (PI * progress).cos())
}

pub struct AdamW {
    cfg: AdamWConfig,
    total_steps: usize,
    step: usize,
    moments: HashMap<String, (Matrix, Matrix)>,
}

impl AdamW {
    pub fn new(cfg: AdamWConfig, total_steps: usize) -> Self {
        Self {
            cfg,
            total_steps,
            step: 0,
            moments: HashMap::new(),
        }
    }

    pub fn steps_taken(&self) -> usize {
        self.step
    }

    pub fn current_lr(&self) -> f64 {
        cosine_lr(self.cfg.lr, self.step, self.total_steps)
    }

    /// Applies one update to every parameter that has an entry in `grads`.
    pub fn step(&mut self, model: &mut dyn Params, prefix: &str, grads: &BTreeMap<String, Matrix>) -> Result<()> {
        let lr = self.current_lr();
        self.step += 1;
        if lr == 0.0 {
            return Ok(());
        }
        let norm: f64 = grads.values().flat_map(|g| g.data()).map(|v| v * v).sum::<f64>().sqrt();
        let clip = match self.cfg.clip_norm {
            Some(c) if norm > c => c / norm,
            _ => 1.0,
        };
        let t = self.step as i32;
        let AdamWConfig {
            beta1,
            beta2,
            eps,
            weight_decay,
            ..
        } = self.cfg;
        let bc1 = 1.0 - beta1.powi(t);
        let bc2 = 1.0 - beta2.powi(t);
        let moments = &mut self.moments;
        model.visit_mut(prefix, &mut |name, w| {
            let Some(g) = grads.get(name) else { return };
            let (m, v) = moments
                .entry(name.to_string())
                .or_insert_with(|| (Matrix::zeros(w.rows(), w.cols()), Matrix::zeros(w.rows(), w.cols())));
            for (((wi, gi), mi), vi) in w
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                let gi = gi * clip;
                *mi = beta1 * *mi + (1.0 - beta1) * gi;
                *vi = beta2 * *vi + (1.0 - beta2) * gi * gi;
                let mhat = *mi / bc1;
                let vhat = *vi / bc2;
                *wi -= lr * (mhat / (vhat.sqrt() + eps) + weight_decay * *wi);
            }
        });
        Ok(())
    }
}
