use serde::{Deserialize, Serialize};

use super::backward::Gradients;
use crate::data::AugmentConfig;
use crate::error::{Error, Result};
use crate::model::ModelGraph;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub epochs: usize,
    pub lr0: f64,
    /// Epochs between warm restarts.
    pub restart_period: usize,
    pub eta_min: f64,
    pub seed: u64,
    pub lambda: f32,
    pub augment: AugmentConfig,
    /// Stops after this many optimizer steps, even mid-epoch.
    pub max_steps: Option<usize>,
    /// Validate every this many epochs (and always after the last one).
    pub val_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 8,
            epochs: 4000,
            lr0: 1e-3,
            restart_period: 20,
            eta_min: 0.0,
            seed: 0,
            lambda: super::DEFAULT_LAMBDA,
            augment: AugmentConfig::default(),
            max_steps: None,
            val_every: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::invalid("batch_size must be at least 1"));
        }
        if !(self.lr0 > 0.0 && self.lr0.is_finite()) {
            return Err(Error::invalid(format!("lr0 must be positive, got {}", self.lr0)));
        }
        if self.restart_period == 0 {
            return Err(Error::invalid("restart_period must be at least 1"));
        }
        if !(self.eta_min >= 0.0 && self.eta_min <= self.lr0) {
            return Err(Error::invalid("eta_min must lie in [0, lr0]"));
        }
        if self.val_every == 0 {
            return Err(Error::invalid("val_every must be at least 1"));
        }
        Ok(())
    }
}

/// Cosine annealing with fixed-period warm restarts, evaluated per epoch.
pub fn lr_schedule(epoch: usize, cfg: &TrainConfig) -> f64 {
    let period = cfg.restart_period.max(1);
    let t = (epoch % period) as f64 / period as f64;
    cfg.eta_min + (cfg.lr0 - cfg.eta_min) * (1.0 + (std::f64::consts::PI * t).cos()) / 2.0
}

/// Plain SGD: `theta -= lr * g`. All gradients are checked before any
/// parameter changes.
pub fn sgd_step(model: &mut ModelGraph, grads: &Gradients, lr: f64) -> Result<()> {
    let params = model.trainable_mut();
    if params.len() != grads.entries.len() {
        return Err(Error::shape(format!("{} parameter tensors, {} gradients", params.len(), grads.entries.len())));
    }
    for ((name, p), (gname, g)) in params.iter().zip(&grads.entries) {
        if name != gname || p.len() != g.len() {
            return Err(Error::shape(format!("gradient {gname} ({}) does not match parameter {name} ({})", g.len(), p.len())));
        }
        if g.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("gradient of {name}")));
        }
    }
    if lr == 0.0 {
        return Ok(());
    }
    let lr = lr as f32;
    for ((_, p), (_, g)) in params.into_iter().zip(&grads.entries) {
        for (p, g) in p.iter_mut().zip(g) {
            *p -= lr * g;
        }
    }
    Ok(())
}
