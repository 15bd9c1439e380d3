use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Scalar, Tensor};
use crate::model::{BnUpdate, WeightStore};

use super::TrainError;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimizerConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Linear ramp before the cosine decay starts.
    pub warmup_steps: usize,
    /// Global gradient-norm ceiling; `None` disables clipping.
    pub clip_norm: Option<f64>,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            weight_decay: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            warmup_steps: 0,
            clip_norm: None,
        }
    }
}

impl OptimizerConfig {
    /// Learning rate at `step` (0-based) of `total`: warmup, then cosine to 0.
    pub fn lr_at(&self, step: usize, total: usize) -> f64 {
        if step < self.warmup_steps {
            return self.lr * (step + 1) as f64 / self.warmup_steps as f64;
        }
        let span = total.saturating_sub(self.warmup_steps).max(1) as f64;
        let t = ((step - self.warmup_steps) as f64 / span).min(1.0);
        0.5 * self.lr * (1.0 + (std::f64::consts::PI * t).cos())
    }
}

/// Adam with decoupled weight decay. Decay applies to conv and linear
/// weights only; biases and batch-norm affine terms are not shrunk.
#[derive(Debug, Clone)]
pub struct AdamW {
    pub config: OptimizerConfig,
    step: usize,
    moments: BTreeMap<String, (Vec<f64>, Vec<f64>)>,
}

impl AdamW {
    pub fn new(config: OptimizerConfig) -> Self {
        Self {
            config,
            step: 0,
            moments: BTreeMap::new(),
        }
    }

    /// Global L2 norm of a gradient set.
    pub fn grad_norm<T: Scalar>(grads: &BTreeMap<String, Tensor<T>>) -> f64 {
        grads
            .values()
            .flat_map(|g| g.data().iter().map(|v| v.f64() * v.f64()))
            .sum::<f64>()
            .sqrt()
    }

    pub fn apply<T: Scalar>(
        &mut self,
        weights: &mut WeightStore<T>,
        grads: &BTreeMap<String, Tensor<T>>,
        lr: f64,
    ) -> Result<(), TrainError> {
        self.step += 1;
        let c = self.config;
        let norm = Self::grad_norm(grads);
        if !norm.is_finite() {
            return Err(TrainError::NonFinite { term: "gradient".into() });
        }
        let clip = match c.clip_norm {
            Some(max) if norm > max => max / norm,
            _ => 1.0,
        };
        let bc1 = 1.0 - c.beta1.powi(self.step as i32);
        let bc2 = 1.0 - c.beta2.powi(self.step as i32);
        for (name, g) in grads {
            let decay = name.ends_with(".weight") && g.shape().len() > 1;
            let p = weights.get(name)?;
            let (m, v) = self
                .moments
                .entry(name.clone())
                .or_insert_with(|| (vec![0.0; g.numel()], vec![0.0; g.numel()]));
            let data: Vec<T> = p
                .data()
                .iter()
                .zip(g.data())
                .enumerate()
                .map(|(i, (&w, &gi))| {
                    let gi = gi.f64() * clip;
                    m[i] = c.beta1 * m[i] + (1.0 - c.beta1) * gi;
                    v[i] = c.beta2 * v[i] + (1.0 - c.beta2) * gi * gi;
                    let mut w = w.f64();
                    if decay {
                        w -= lr * c.weight_decay * w;
                    }
                    w -= lr * (m[i] / bc1) / ((v[i] / bc2).sqrt() + c.eps);
                    T::of(w)
                })
                .collect();
            let shape = p.shape().to_vec();
            weights.set(name, Tensor::new(&shape, data)?)?;
        }
        Ok(())
    }
}

/// Exponential running-statistic update: `r ← (1 − m)·r + m·batch`.
pub fn update_running_stats<T: Scalar>(
    weights: &mut WeightStore<T>,
    updates: &[BnUpdate<T>],
    momentum: f64,
) -> Result<(), TrainError> {
    for u in updates {
        for (field, batch) in [("running_mean", &u.mean), ("running_var", &u.var)] {
            let name = format!("{}.bn.{field}", u.layer);
            let cur = weights.get(&name)?;
            let data: Vec<T> = cur
                .data()
                .iter()
                .zip(batch.iter())
                .map(|(&r, &b)| T::of((1.0 - momentum) * r.f64() + momentum * b.f64()))
                .collect();
            let shape = cur.shape().to_vec();
            weights.set(&name, Tensor::new(&shape, data)?)?;
        }
    }
    Ok(())
}
