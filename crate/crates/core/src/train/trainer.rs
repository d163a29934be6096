use std::fmt::Write as _;
use std::ops::ControlFlow;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::layers::{Forward, Mode};
use crate::model::ModelGraph;
use crate::params::{ParamId, ParamStore};
use crate::tensor::{Tape, Tensor};
use crate::train::data::SyntheticDataset;
use crate::train::optim::{AdamW, AdamWConfig, Ema};
use crate::train::schedule::{lr_schedule, TrainConfig};

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct HistoryRow {
    pub iter: usize,
    pub loss: f64,
    /// Accuracy on this iteration's batch.
    pub acc: f64,
    pub lr: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct EpochRow {
    pub epoch: usize,
    pub mean_loss: f64,
    /// Eval-mode accuracy over the whole training set after the epoch.
    pub train_acc: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct TrainHistory {
    pub rows: Vec<HistoryRow>,
    pub epochs: Vec<EpochRow>,
}

impl TrainHistory {
    /// `iter,loss,acc,lr` with six decimals.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("iter,loss,acc,lr\n");
        for r in &self.rows {
            let _ = writeln!(out, "{},{:.6},{:.6},{:.6}", r.iter, r.loss, r.acc, r.lr);
        }
        out
    }

    pub fn best_train_acc(&self) -> f64 {
        self.epochs.iter().map(|e| e.train_acc).fold(0.0, f64::max)
    }
}

/// Result of one forward/backward pass.
pub struct StepOutput {
    pub loss: f64,
    pub correct: usize,
    pub grads: Vec<Option<Vec<f32>>>,
    pub stat_updates: Vec<(ParamId, Vec<f32>)>,
}

fn argmax(row: &[f32]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

fn count_correct(logits: &Tensor<f32>, labels: &[usize]) -> usize {
    let k = logits.shape()[1];
    logits
        .data()
        .chunks(k)
        .zip(labels)
        .filter(|(row, &l)| argmax(row) == l)
        .count()
}

/// Training-mode forward and backward on one batch; parameters are not
/// modified.
pub fn compute_gradients(
    model: &ModelGraph,
    images: &Tensor<f32>,
    labels: &[usize],
    smoothing: f64,
) -> Result<StepOutput> {
    let mut tape: Tape<f32> = Tape::new();
    let mut f = Forward::new(&mut tape, model.params(), Mode::Train);
    let x = f.tape.constant(images.clone());
    let out = model.forward(&mut f, x)?;
    let loss = f.tape.cross_entropy(out.logits, labels, smoothing as f32)?;
    let value = f.tape.value(loss).item()? as f64;
    let correct = count_correct(f.tape.value(out.logits), labels);
    f.tape.backward(loss)?;
    Ok(StepOutput {
        loss: value,
        correct,
        grads: f.gradients(),
        stat_updates: f.take_stat_updates(),
    })
}

/// Eval-mode accuracy over the whole dataset using the given parameters.
pub fn evaluate(model: &ModelGraph, params: &ParamStore, data: &SyntheticDataset, batch: usize) -> Result<f64> {
    let indices: Vec<usize> = (0..data.len()).collect();
    let mut correct = 0;
    for chunk in indices.chunks(batch.max(1)) {
        let (images, labels) = data.batch(chunk);
        let mut tape: Tape<f32> = Tape::inference();
        let mut f = Forward::new(&mut tape, params, Mode::Eval);
        let x = f.tape.constant(images);
        let out = model.forward(&mut f, x)?;
        correct += count_correct(tape.value(out.logits), &labels);
    }
    Ok(correct as f64 / data.len() as f64)
}

pub struct TrainOutcome {
    pub history: TrainHistory,
    /// EMA shadow parameters when enabled.
    pub ema: Option<ParamStore>,
}

fn diverged(iter: usize, e: Error) -> Error {
    match e {
        Error::NonFinite { .. } => Error::Diverged {
            iter,
            loss: f64::NAN,
        },
        other => other,
    }
}

/// Runs up to `config.epochs` epochs of AdamW on `data`. After each epoch
/// `on_epoch` sees the summary and the current parameters and may stop the
/// run early. Everything is sequential and seeded, so identical inputs give
/// bitwise-identical histories and parameters.
pub fn train_loop(
    model: &mut ModelGraph,
    data: &SyntheticDataset,
    config: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochRow, &ParamStore) -> ControlFlow<()>,
) -> Result<TrainOutcome> {
    config.validate()?;
    let mut opt = AdamW::new(
        AdamWConfig {
            weight_decay: config.weight_decay,
            ..AdamWConfig::default()
        },
        model.params(),
    );
    let mut ema = config.ema_decay.map(|d| Ema::new(model.params(), d));
    let mut history = TrainHistory::default();
    let mut iter = 0;
    for epoch in 0..config.epochs {
        let order = data.epoch_order(config.seed, epoch);
        let mut loss_sum = 0.0;
        let mut batches = 0;
        for chunk in order.chunks(config.batch_size) {
            let (images, labels) = data.batch(chunk);
            let lr = lr_schedule(iter, config);
            let step = compute_gradients(model, &images, &labels, config.smoothing)
                .map_err(|e| diverged(iter, e))?;
            if !step.loss.is_finite() {
                return Err(Error::Diverged {
                    iter,
                    loss: step.loss,
                });
            }
            let store = model.params_mut();
            for (id, values) in step.stat_updates {
                store.tensor_mut(id).data_mut().copy_from_slice(&values);
            }
            opt.step(store, &step.grads, lr)?;
            if let Some(ema) = ema.as_mut() {
                ema.update(model.params())?;
            }
            history.rows.push(HistoryRow {
                iter,
                loss: step.loss,
                acc: step.correct as f64 / labels.len() as f64,
                lr,
            });
            loss_sum += step.loss;
            batches += 1;
            iter += 1;
        }
        let row = EpochRow {
            epoch,
            mean_loss: loss_sum / batches.max(1) as f64,
            train_acc: evaluate(model, model.params(), data, 64)?,
        };
        history.epochs.push(row);
        if on_epoch(&row, model.params()).is_break() {
            break;
        }
    }
    Ok(TrainOutcome {
        history,
        ema: ema.map(|e| e.shadow().clone()),
    })
}
