use super::tape::{GradSink, Op, Var};
use super::{Scalar, Tape, Tensor};
use crate::error::{Error, Result};

pub(crate) struct BatchNormSaved<T> {
    input: Var,
    gamma: Var,
    beta: Var,
    normalized: Vec<T>,
    inv_std: Vec<T>,
    training: bool,
}

pub(crate) struct LayerNormSaved<T> {
    input: Var,
    gamma: Var,
    beta: Var,
    normalized: Vec<T>,
    inv_std: Vec<T>,
}

/// Running statistics of a batch-norm layer, updated in training mode.
pub struct RunningStats<'a, T> {
    pub mean: &'a mut [T],
    pub var: &'a mut [T],
    pub momentum: T,
}

fn check_eps<T: Scalar>(op: &'static str, eps: T) -> Result<()> {
    if eps > T::zero() {
        Ok(())
    } else {
        Err(Error::InvalidArgument(format!("{op}: eps must be > 0, got {eps:?}")))
    }
}

fn check_affine<T: Scalar>(op: &'static str, t: &Tensor<T>, n: usize, what: &str) -> Result<()> {
    if t.shape() != [n] {
        return Err(Error::shape(
            op,
            format!("{what} shape {:?} != [{n}]", t.shape()),
        ));
    }
    Ok(())
}

impl<T: Scalar> Tape<T> {
    /// Per-channel normalisation of `[B, C, H, W]`.
    ///
    /// Training mode normalises with the biased batch variance and folds the
    /// batch statistics into `stats` with `momentum` (unbiased variance, as
    /// running estimates conventionally use). Eval mode uses `stats` as is.
    pub fn batch_norm(
        &mut self,
        input: Var,
        gamma: Var,
        beta: Var,
        stats: RunningStats<'_, T>,
        training: bool,
        eps: T,
    ) -> Result<Var> {
        self.check_all(&[input, gamma, beta])?;
        check_eps("batch_norm", eps)?;
        let x = self.value(input);
        let (b, c, h, w) = x.dims4("batch_norm")?;
        check_affine("batch_norm", self.value(gamma), c, "gamma")?;
        check_affine("batch_norm", self.value(beta), c, "beta")?;
        if stats.mean.len() != c || stats.var.len() != c {
            return Err(Error::shape(
                "batch_norm",
                format!(
                    "running stats have {}/{} entries for {c} channels",
                    stats.mean.len(),
                    stats.var.len()
                ),
            ));
        }
        let plane = h * w;
        let count = b * plane;
        let xd = x.data();
        let mut mean = vec![T::zero(); c];
        let mut inv_std = vec![T::zero(); c];
        if training {
            let n = T::from_f64(count as f64);
            for ch in 0..c {
                let mut s = T::zero();
                for bi in 0..b {
                    s += xd[(bi * c + ch) * plane..][..plane].iter().copied().sum::<T>();
                }
                let m = s / n;
                let mut sq = T::zero();
                for bi in 0..b {
                    for &v in &xd[(bi * c + ch) * plane..][..plane] {
                        sq += (v - m) * (v - m);
                    }
                }
                let var = sq / n;
                mean[ch] = m;
                inv_std[ch] = T::one() / (var + eps).sqrt();
                let unbiased = if count > 1 {
                    sq / T::from_f64((count - 1) as f64)
                } else {
                    var
                };
                let mo = stats.momentum;
                stats.mean[ch] = (T::one() - mo) * stats.mean[ch] + mo * m;
                stats.var[ch] = (T::one() - mo) * stats.var[ch] + mo * unbiased;
            }
        } else {
            for ch in 0..c {
                mean[ch] = stats.mean[ch];
                inv_std[ch] = T::one() / (stats.var[ch] + eps).sqrt();
            }
        }
        let g = self.value(gamma).data();
        let bt = self.value(beta).data();
        let mut normalized = vec![T::zero(); xd.len()];
        let mut out = vec![T::zero(); xd.len()];
        for bi in 0..b {
            for ch in 0..c {
                let off = (bi * c + ch) * plane;
                for i in off..off + plane {
                    let xh = (xd[i] - mean[ch]) * inv_std[ch];
                    normalized[i] = xh;
                    out[i] = g[ch] * xh + bt[ch];
                }
            }
        }
        let value = Tensor::new(x.shape().to_vec(), out)?;
        self.push(
            "batch_norm",
            value,
            &[input, gamma, beta],
            Op::BatchNorm(BatchNormSaved {
                input,
                gamma,
                beta,
                normalized,
                inv_std,
                training,
            }),
        )
    }

    /// Normalisation over the last axis with affine `gamma`, `beta`.
    pub fn layer_norm(&mut self, input: Var, gamma: Var, beta: Var, eps: T) -> Result<Var> {
        self.check_all(&[input, gamma, beta])?;
        check_eps("layer_norm", eps)?;
        let x = self.value(input);
        let d = match x.shape().last() {
            Some(&d) if d > 0 => d,
            _ => {
                return Err(Error::shape(
                    "layer_norm",
                    format!("cannot normalise shape {:?}", x.shape()),
                ))
            }
        };
        check_affine("layer_norm", self.value(gamma), d, "gamma")?;
        check_affine("layer_norm", self.value(beta), d, "beta")?;
        let g = self.value(gamma).data();
        let bt = self.value(beta).data();
        let rows = x.numel() / d;
        let n = T::from_f64(d as f64);
        let mut normalized = vec![T::zero(); x.numel()];
        let mut out = vec![T::zero(); x.numel()];
        let mut inv_std = vec![T::zero(); rows];
        for (r, row) in x.data().chunks(d).enumerate() {
            let m = row.iter().copied().sum::<T>() / n;
            let var = row.iter().map(|&v| (v - m) * (v - m)).sum::<T>() / n;
            let is = T::one() / (var + eps).sqrt();
            inv_std[r] = is;
            for i in 0..d {
                let xh = (row[i] - m) * is;
                normalized[r * d + i] = xh;
                out[r * d + i] = g[i] * xh + bt[i];
            }
        }
        let value = Tensor::new(x.shape().to_vec(), out)?;
        self.push(
            "layer_norm",
            value,
            &[input, gamma, beta],
            Op::LayerNorm(LayerNormSaved {
                input,
                gamma,
                beta,
                normalized,
                inv_std,
            }),
        )
    }
}

impl<T: Scalar> BatchNormSaved<T> {
    pub(crate) fn backward(&self, gy: &[T], sink: &mut GradSink<'_, T>) {
        let (b, c, h, w) = sink.value(self.input).dims4("batch_norm").expect("validated");
        let plane = h * w;
        let gamma = sink.value(self.gamma).data();
        let mut sum_dy = vec![T::zero(); c];
        let mut sum_dy_xh = vec![T::zero(); c];
        for bi in 0..b {
            for ch in 0..c {
                let off = (bi * c + ch) * plane;
                for i in off..off + plane {
                    sum_dy[ch] += gy[i];
                    sum_dy_xh[ch] += gy[i] * self.normalized[i];
                }
            }
        }
        if sink.wants(self.gamma) {
            let gg = sink.slot(self.gamma);
            for ch in 0..c {
                gg[ch] += sum_dy_xh[ch];
            }
        }
        if sink.wants(self.beta) {
            let gb = sink.slot(self.beta);
            for ch in 0..c {
                gb[ch] += sum_dy[ch];
            }
        }
        if sink.wants(self.input) {
            let n = T::from_f64((b * plane) as f64);
            let gx = sink.slot(self.input);
            for bi in 0..b {
                for ch in 0..c {
                    let off = (bi * c + ch) * plane;
                    let k = gamma[ch] * self.inv_std[ch];
                    for i in off..off + plane {
                        gx[i] += if self.training {
                            k * (gy[i] - sum_dy[ch] / n - self.normalized[i] * sum_dy_xh[ch] / n)
                        } else {
                            k * gy[i]
                        };
                    }
                }
            }
        }
    }
}

impl<T: Scalar> LayerNormSaved<T> {
    pub(crate) fn backward(&self, gy: &[T], sink: &mut GradSink<'_, T>) {
        let d = self.inv_std.len();
        let d = gy.len().checked_div(d).unwrap_or(0);
        let gamma = sink.value(self.gamma).data();
        if sink.wants(self.gamma) {
            let gg = sink.slot(self.gamma);
            for (i, &g) in gy.iter().enumerate() {
                gg[i % d] += g * self.normalized[i];
            }
        }
        if sink.wants(self.beta) {
            let gb = sink.slot(self.beta);
            for (i, &g) in gy.iter().enumerate() {
                gb[i % d] += g;
            }
        }
        if sink.wants(self.input) {
            let n = T::from_f64(d as f64);
            let gx = sink.slot(self.input);
            for (r, &is) in self.inv_std.iter().enumerate() {
                let row = r * d..(r + 1) * d;
                let mut s1 = T::zero();
                let mut s2 = T::zero();
                for i in row.clone() {
                    let dxh = gy[i] * gamma[i - r * d];
                    s1 += dxh;
                    s2 += dxh * self.normalized[i];
                }
                for i in row {
                    let dxh = gy[i] * gamma[i - r * d];
                    gx[i] += is * (dxh - s1 / n - self.normalized[i] * s2 / n);
                }
            }
        }
    }
}
