//! Central finite-difference gradient checks.
//!
//! The model check runs the whole network in `f64`. In `f32` the rounding
//! of the loss divided by `2h` is of the order of the gradients of many
//! backbone parameters. In `f64` with `h = 1e-3` the truncation error of the
//! difference quotient dominates instead (it scales with `h²`; batch-normed
//! depthwise channels have large third derivatives), so the model check
//! uses `h = 1e-4`, where both error sources sit well below `1e-3`.

use std::collections::BTreeSet;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::layers::{Forward, Mode};
use crate::model::ModelGraph;
use crate::params::LayerKind;
use crate::tensor::{Scalar, Tape, Tensor, Var};

/// Step for single primitives.
pub const DEFAULT_STEP: f64 = 1e-3;
/// Step for the whole-model `f64` check.
pub const MODEL_STEP: f64 = 1e-4;
pub const DEFAULT_TOLERANCE: f64 = 1e-3;

/// Per-tensor f64 gradients indexed like the parameter store.
type Grads64 = Vec<Option<Vec<f64>>>;

/// `|a − n| / max(|a|, |n|, 1e-8)`
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

/// One checked scalar of a primitive input.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ElementCheck {
    pub input: usize,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_err: f64,
}

/// Checks every element of every input of `build`, which must return a
/// scalar loss recorded on the given tape.
pub fn check_function<T: Scalar>(
    inputs: &[Tensor<T>],
    step: f64,
    build: impl Fn(&mut Tape<T>, &[Var]) -> Result<Var>,
) -> Result<Vec<ElementCheck>> {
    let eval = |values: &[Tensor<T>]| -> Result<f64> {
        let mut tape = Tape::inference();
        let vars: Vec<Var> = values.iter().map(|t| tape.constant(t.clone())).collect();
        let loss = build(&mut tape, &vars)?;
        Ok(tape.try_value(loss)?.item()?.to_f64())
    };
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs
        .iter()
        .map(|t| tape.leaf(t.clone().with_requires_grad(true)))
        .collect();
    let loss = build(&mut tape, &vars)?;
    tape.backward(loss)?;
    let mut out = Vec::new();
    let mut probe = inputs.to_vec();
    for (i, &v) in vars.iter().enumerate() {
        let grad = tape.grad(v).ok_or(Error::NotOnTape)?.to_vec();
        for j in 0..inputs[i].numel() {
            let orig = probe[i].data()[j];
            probe[i].data_mut()[j] = orig + T::from_f64(step);
            let plus = eval(&probe)?;
            probe[i].data_mut()[j] = orig - T::from_f64(step);
            let minus = eval(&probe)?;
            probe[i].data_mut()[j] = orig;
            // Divide by the step actually taken after rounding to T.
            let taken = (orig + T::from_f64(step)).to_f64() - (orig - T::from_f64(step)).to_f64();
            let numeric = (plus - minus) / taken;
            let analytic = grad[j].to_f64();
            out.push(ElementCheck {
                input: i,
                index: j,
                analytic,
                numeric,
                rel_err: relative_error(analytic, numeric),
            });
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckConfig {
    pub samples: usize,
    pub step: f64,
    pub tolerance: f64,
    pub seed: u64,
    pub smoothing: f64,
    /// Batch norm on batch statistics (`Train`) or running statistics.
    pub mode: Mode,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        GradCheckConfig {
            samples: 200,
            step: MODEL_STEP,
            tolerance: DEFAULT_TOLERANCE,
            seed: 0,
            smoothing: 0.1,
            mode: Mode::Train,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ParamCheck {
    pub param: String,
    pub kind: LayerKind,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_err: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradCheckReport {
    pub checks: Vec<ParamCheck>,
    pub max_rel_err: f64,
    pub tolerance: f64,
    pub kinds_covered: Vec<LayerKind>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_err <= self.tolerance
    }

    /// Checks sorted by descending relative error.
    pub fn worst(&self, n: usize) -> Vec<&ParamCheck> {
        let mut v: Vec<_> = self.checks.iter().collect();
        v.sort_by(|a, b| b.rel_err.total_cmp(&a.rel_err));
        v.truncate(n);
        v
    }
}

fn model_loss(
    model: &ModelGraph,
    values: &[Tensor<f64>],
    input: &Tensor<f64>,
    labels: &[usize],
    config: &GradCheckConfig,
    record: bool,
) -> Result<(f64, Option<Grads64>)> {
    let mut tape = if record { Tape::new() } else { Tape::inference() };
    let mut f = Forward::with_values(&mut tape, model.params(), config.mode, values);
    let x = f.tape.constant(input.clone());
    let out = model.forward(&mut f, x)?;
    let loss = f.tape.cross_entropy(out.logits, labels, config.smoothing)?;
    let value = f.tape.value(loss).item()?;
    if !record {
        return Ok((value, None));
    }
    f.tape.backward(loss)?;
    Ok((value, Some(f.gradients_native())))
}

/// Compares backprop against central differences for a random subsample of
/// the model's trainable scalars. Every trainable tensor contributes at
/// least one scalar, so every layer kind is covered; frozen tensors are
/// skipped. Batch norm runs on batch statistics.
pub fn grad_check(
    model: &ModelGraph,
    input: &Tensor<f32>,
    labels: &[usize],
    config: &GradCheckConfig,
) -> Result<GradCheckReport> {
    let store = model.params();
    let values: Vec<Tensor<f64>> = store.entries().iter().map(|e| e.tensor.cast()).collect();
    let input = input.cast::<f64>();
    let (_, grads) = model_loss(model, &values, &input, labels, config, true)?;
    let grads = grads.expect("recorded");

    let trainable: Vec<_> = store.ids().filter(|&id| store.entry(id).trainable).collect();
    if trainable.is_empty() {
        return Err(Error::InvalidArgument("model has no trainable parameters".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut picks = BTreeSet::new();
    for &id in &trainable {
        picks.insert((id, rng.random_range(0..store.tensor(id).numel())));
    }
    let total: usize = trainable.iter().map(|&id| store.tensor(id).numel()).sum();
    let target = config.samples.min(total);
    while picks.len() < target {
        let id = trainable[rng.random_range(0..trainable.len())];
        picks.insert((id, rng.random_range(0..store.tensor(id).numel())));
    }

    let mut probe = values.clone();
    let mut checks = Vec::with_capacity(picks.len());
    for (id, j) in picks {
        let k = id.index();
        let orig = probe[k].data()[j];
        probe[k].data_mut()[j] = orig + config.step;
        let (plus, _) = model_loss(model, &probe, &input, labels, config, false)?;
        probe[k].data_mut()[j] = orig - config.step;
        let (minus, _) = model_loss(model, &probe, &input, labels, config, false)?;
        probe[k].data_mut()[j] = orig;
        let numeric = (plus - minus) / (2.0 * config.step);
        let analytic = grads[k].as_ref().map_or(0.0, |g| g[j]);
        let entry = store.entry(id);
        checks.push(ParamCheck {
            param: entry.name.clone(),
            kind: store.layer(entry.layer).kind,
            index: j,
            analytic,
            numeric,
            rel_err: relative_error(analytic, numeric),
        });
    }
    let max_rel_err = checks.iter().map(|c| c.rel_err).fold(0.0, f64::max);
    let mut kinds: Vec<LayerKind> = Vec::new();
    for c in &checks {
        if !kinds.contains(&c.kind) {
            kinds.push(c.kind);
        }
    }
    Ok(GradCheckReport {
        checks,
        max_rel_err,
        tolerance: config.tolerance,
        kinds_covered: kinds,
    })
}
