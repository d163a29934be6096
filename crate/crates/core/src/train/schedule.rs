use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Optimisation hyperparameters for one run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr_start: f64,
    pub lr_peak: f64,
    pub warmup_iters: usize,
    pub total_iters: usize,
    pub weight_decay: f64,
    pub smoothing: f64,
    /// Shadow-weight decay; `None` disables EMA.
    pub ema_decay: Option<f64>,
    pub seed: u64,
    pub batch_size: usize,
    pub epochs: usize,
}

pub const DEFAULT_EMA_DECAY: f64 = 0.9995;

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr_start: 2e-4,
            lr_peak: 2e-3,
            warmup_iters: 3000,
            total_iters: 300_000,
            weight_decay: 0.01,
            smoothing: 0.1,
            ema_decay: None,
            seed: 0,
            batch_size: 128,
            epochs: 300,
        }
    }
}

impl TrainConfig {
    /// Budget for `epochs` passes over `samples` images. Warm-up covers the
    /// first tenth of the run.
    pub fn for_dataset(samples: usize, batch_size: usize, epochs: usize, seed: u64) -> Self {
        let per_epoch = samples.div_ceil(batch_size.max(1));
        let total_iters = (per_epoch * epochs).max(2);
        TrainConfig {
            warmup_iters: (total_iters / 10).max(1),
            total_iters,
            seed,
            batch_size,
            epochs,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        if !(self.lr_start > 0.0 && self.lr_start <= self.lr_peak) {
            problems.push(format!(
                "need 0 < lr_start <= lr_peak, got {} and {}",
                self.lr_start, self.lr_peak
            ));
        }
        if self.warmup_iters >= self.total_iters {
            problems.push(format!(
                "warmup_iters {} must be below total_iters {}",
                self.warmup_iters, self.total_iters
            ));
        }
        if !(0.0..1.0).contains(&self.smoothing) {
            problems.push(format!("smoothing {} outside [0, 1)", self.smoothing));
        }
        if self.weight_decay < 0.0 {
            problems.push(format!("weight_decay {} is negative", self.weight_decay));
        }
        if let Some(d) = self.ema_decay {
            if !(0.0..=1.0).contains(&d) {
                problems.push(format!("ema_decay {d} outside [0, 1]"));
            }
        }
        if self.batch_size == 0 {
            problems.push("batch_size must be positive".into());
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(problems))
        }
    }
}

/// Linear warm-up from `lr_start` to `lr_peak`, then cosine decay back to
/// `lr_start` at `total_iters`.
pub fn lr_schedule(iter: usize, config: &TrainConfig) -> f64 {
    let (lo, hi) = (config.lr_start, config.lr_peak);
    let iter = iter.min(config.total_iters);
    if iter < config.warmup_iters {
        return lo + (hi - lo) * iter as f64 / config.warmup_iters as f64;
    }
    let span = config.total_iters - config.warmup_iters;
    if span == 0 {
        return hi;
    }
    let t = (iter - config.warmup_iters) as f64 / span as f64;
    lo + (hi - lo) * 0.5 * (1.0 + (PI * t).cos())
}
