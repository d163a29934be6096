use super::pointwise::softmax_row;
use super::tape::{GradSink, Op, Var};
use super::{Scalar, Tape, Tensor};
use crate::error::{Error, Result};

pub(crate) struct CrossEntropySaved<T> {
    logits: Var,
    /// `p − q` per row, before the 1/B factor.
    residual: Vec<T>,
}

impl<T: Scalar> Tape<T> {
    /// Batch-mean cross entropy of `[B, K]` logits against the smoothed
    /// target `(1 − s)·onehot(label) + s/K`.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize], smoothing: T) -> Result<Var> {
        self.check(logits)?;
        let x = self.value(logits);
        let (batch, classes) = match *x.shape() {
            [b, k] if b > 0 && k > 0 => (b, k),
            _ => {
                return Err(Error::shape(
                    "cross_entropy",
                    format!("expected non-empty [B, K] logits, got {:?}", x.shape()),
                ))
            }
        };
        if labels.len() != batch {
            return Err(Error::shape(
                "cross_entropy",
                format!("{} labels for a batch of {batch}", labels.len()),
            ));
        }
        if !(smoothing >= T::zero() && smoothing < T::one()) {
            return Err(Error::InvalidArgument(format!(
                "smoothing must lie in [0, 1), got {smoothing:?}"
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
            return Err(Error::InvalidArgument(format!(
                "label {bad} out of range for {classes} classes"
            )));
        }
        let k = T::from_f64(classes as f64);
        let off = smoothing / k;
        let on = T::one() - smoothing + off;
        let mut total = T::zero();
        let mut residual = vec![T::zero(); x.numel()];
        for (b, row) in x.data().chunks(classes).enumerate() {
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let lse = row.iter().map(|&v| (v - max).exp()).sum::<T>().ln() + max;
            let mut loss = T::zero();
            let mut probs = row.to_vec();
            softmax_row(&mut probs);
            for (c, &v) in row.iter().enumerate() {
                let q = if c == labels[b] { on } else { off };
                loss += q * (lse - v);
                residual[b * classes + c] = probs[c] - q;
            }
            total += loss;
        }
        let value = Tensor::scalar(total / T::from_f64(batch as f64));
        self.push(
            "cross_entropy",
            value,
            &[logits],
            Op::CrossEntropy(CrossEntropySaved { logits, residual }),
        )
    }
}

impl<T: Scalar> CrossEntropySaved<T> {
    pub(crate) fn backward(&self, gy: &[T], sink: &mut GradSink<'_, T>) {
        if !sink.wants(self.logits) {
            return;
        }
        let batch = T::from_f64(sink.value(self.logits).shape()[0] as f64);
        let k = gy[0] / batch;
        let g: Vec<T> = self.residual.iter().map(|&r| r * k).collect();
        sink.add(self.logits, &g);
    }
}
