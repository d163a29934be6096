//! Toy-scale training and gradient verification.

pub mod data;
pub mod grad_check;
pub mod optim;
pub mod schedule;
pub mod trainer;

pub use data::{SyntheticConfig, SyntheticDataset};
pub use grad_check::{grad_check, GradCheckConfig, GradCheckReport};
pub use optim::{adamw_step, ema_update, AdamW, AdamWConfig, Ema};
pub use schedule::{lr_schedule, TrainConfig};
pub use trainer::{compute_gradients, evaluate, train_loop, TrainHistory};

use crate::error::Result;
use crate::tensor::{Tape, Tensor};

/// Label-smoothing cross-entropy of `logits` as a plain number.
pub fn label_smoothing_ce(logits: &Tensor<f32>, labels: &[usize], smoothing: f64) -> Result<f64> {
    let mut tape: Tape<f64> = Tape::inference();
    let x = tape.constant(logits.cast());
    let loss = tape.cross_entropy(x, labels, smoothing)?;
    tape.value(loss).item()
}
