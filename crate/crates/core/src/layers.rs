//! Parameterised layers and the forward-pass context they run in.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::params::{InitKind, Initializer, LayerId, LayerKind, ParamId, ParamRole, ParamStore};
use crate::tensor::{Activation, RunningStats, Scalar, Tape, Tensor, Var};

pub const NORM_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;
pub const LINEAR_INIT_STD: f64 = 0.02;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Batch statistics; running statistics are updated.
    Train,
    /// Running statistics.
    Eval,
}

/// State for one forward pass: the tape, the parameter leaves created so
/// far, and the running-statistic updates produced in training mode.
pub struct Forward<'a, T: Scalar> {
    pub tape: &'a mut Tape<T>,
    store: &'a ParamStore,
    values: Option<&'a [Tensor<T>]>,
    vars: Vec<Option<Var>>,
    mode: Mode,
    stat_updates: Vec<(ParamId, Vec<f32>)>,
}

impl<'a, T: Scalar> Forward<'a, T> {
    pub fn new(tape: &'a mut Tape<T>, store: &'a ParamStore, mode: Mode) -> Self {
        Forward {
            tape,
            store,
            values: None,
            vars: vec![None; store.len()],
            mode,
            stat_updates: Vec::new(),
        }
    }

    /// Like [`Forward::new`], but parameter leaves take their values from
    /// `values` (indexed by [`ParamId`]) instead of the store.
    pub fn with_values(
        tape: &'a mut Tape<T>,
        store: &'a ParamStore,
        mode: Mode,
        values: &'a [Tensor<T>],
    ) -> Self {
        assert_eq!(values.len(), store.len(), "one value per stored tensor");
        let mut f = Self::new(tape, store, mode);
        f.values = Some(values);
        f
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn store(&self) -> &ParamStore {
        self.store
    }

    /// Tape leaf for a stored parameter, created on first use.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.vars[id.0] {
            return v;
        }
        let entry = self.store.entry(id);
        let value = match self.values {
            Some(values) => values[id.0].clone(),
            None => entry.tensor.cast::<T>(),
        };
        let v = self.tape.leaf(value.with_requires_grad(entry.trainable));
        self.vars[id.0] = Some(v);
        v
    }

    pub fn param_var(&self, id: ParamId) -> Option<Var> {
        self.vars[id.0]
    }

    /// Gradients by parameter id after `tape.backward`, in `f32`.
    pub fn gradients(&self) -> Vec<Option<Vec<f32>>> {
        self.vars
            .iter()
            .map(|v| {
                v.and_then(|v| self.tape.grad(v))
                    .map(|g| g.iter().map(|&x| Scalar::to_f32(x)).collect())
            })
            .collect()
    }

    /// Gradients in the tape's own precision.
    pub fn gradients_native(&self) -> Vec<Option<Vec<T>>> {
        self.vars
            .iter()
            .map(|v| v.and_then(|v| self.tape.grad(v)).map(<[T]>::to_vec))
            .collect()
    }

    pub fn take_stat_updates(&mut self) -> Vec<(ParamId, Vec<f32>)> {
        std::mem::take(&mut self.stat_updates)
    }
}

/// One row of a symbolic shape trace.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct TraceRow {
    pub layer: String,
    pub kind: String,
    pub out_shape: Vec<usize>,
    /// Multiply-accumulates for this layer.
    pub macs: u64,
}

#[derive(Debug, Default)]
pub struct Tracer {
    pub rows: Vec<TraceRow>,
}

impl Tracer {
    pub fn push(&mut self, layer: impl Into<String>, kind: &str, out_shape: Vec<usize>, macs: u64) {
        self.rows.push(TraceRow {
            layer: layer.into(),
            kind: kind.to_string(),
            out_shape,
            macs,
        });
    }

    pub fn total_macs(&self) -> u64 {
        self.rows.iter().map(|r| r.macs).sum()
    }
}

fn dims4(op: &'static str, s: &[usize]) -> Result<(usize, usize, usize, usize)> {
    match *s {
        [b, c, h, w] => Ok((b, c, h, w)),
        _ => Err(Error::shape(op, format!("expected [B, C, H, W], got {s:?}"))),
    }
}

#[derive(Debug, Clone)]
pub struct Conv {
    pub layer: LayerId,
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub groups: usize,
}

impl Conv {
    /// Square kernel with "same" padding (`kernel / 2`), Kaiming fan-out init.
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        init: &mut Initializer,
        name: &str,
        kind: LayerKind,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        groups: usize,
        bias: bool,
    ) -> Self {
        let layer = store.add_layer(name, kind);
        let weight = store.add(
            layer,
            "weight",
            ParamRole::Weight,
            &[out_channels, in_channels / groups, kernel, kernel],
            InitKind::KaimingFanOut {
                fan_out: out_channels * kernel * kernel,
            },
            init,
        );
        let bias = bias.then(|| {
            store.add(layer, "bias", ParamRole::Bias, &[out_channels], InitKind::Zeros, init)
        });
        Conv {
            layer,
            weight,
            bias,
            in_channels,
            out_channels,
            kernel,
            stride,
            padding: kernel / 2,
            groups,
        }
    }

    pub fn forward<T: Scalar>(&self, f: &mut Forward<'_, T>, x: Var) -> Result<Var> {
        let w = f.param(self.weight);
        let b = self.bias.map(|b| f.param(b));
        f.tape.conv2d(x, w, b, self.stride, self.padding, self.groups)
    }

    pub fn out_shape(&self, input: &[usize]) -> Result<Vec<usize>> {
        let (b, c, h, w) = dims4("conv2d", input)?;
        if c != self.in_channels {
            return Err(Error::shape(
                "conv2d",
                format!("expected {} input channels, got {c}", self.in_channels),
            ));
        }
        let ext = |n: usize| {
            (n + 2 * self.padding)
                .checked_sub(self.kernel)
                .map(|v| v / self.stride + 1)
                .ok_or_else(|| Error::shape("conv2d", format!("kernel larger than padded extent {n}")))
        };
        Ok(vec![b, self.out_channels, ext(h)?, ext(w)?])
    }

    pub fn trace(&self, t: &mut Tracer, store: &ParamStore, input: &[usize]) -> Result<Vec<usize>> {
        let out = self.out_shape(input)?;
        let meta = store.layer(self.layer);
        t.push(&meta.name, meta.kind.as_str(), out.clone(), self.macs(&out));
        Ok(out)
    }

    /// `out_elems · kh · kw · Cin / groups`
    pub fn macs(&self, out_shape: &[usize]) -> u64 {
        let out_elems: usize = out_shape.iter().product();
        (out_elems * self.kernel * self.kernel * self.in_channels / self.groups) as u64
    }
}

#[derive(Debug, Clone)]
pub struct BatchNorm {
    pub layer: LayerId,
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
    pub channels: usize,
}

impl BatchNorm {
    pub fn new(store: &mut ParamStore, init: &mut Initializer, name: &str, channels: usize) -> Self {
        let layer = store.add_layer(name, LayerKind::BatchNorm);
        let shape = [channels];
        BatchNorm {
            layer,
            gamma: store.add(layer, "gamma", ParamRole::NormScale, &shape, InitKind::Ones, init),
            beta: store.add(layer, "beta", ParamRole::NormShift, &shape, InitKind::Zeros, init),
            running_mean: store.add(
                layer,
                "running_mean",
                ParamRole::RunningMean,
                &shape,
                InitKind::Zeros,
                init,
            ),
            running_var: store.add(
                layer,
                "running_var",
                ParamRole::RunningVar,
                &shape,
                InitKind::Ones,
                init,
            ),
            channels,
        }
    }

    pub fn forward<T: Scalar>(&self, f: &mut Forward<'_, T>, x: Var) -> Result<Var> {
        let gamma = f.param(self.gamma);
        let beta = f.param(self.beta);
        let to_t = |id: ParamId| -> Vec<T> {
            f.store.tensor(id).data().iter().map(|&v| T::from_f32(v)).collect()
        };
        let mut mean = to_t(self.running_mean);
        let mut var = to_t(self.running_var);
        let training = f.mode == Mode::Train;
        let y = f.tape.batch_norm(
            x,
            gamma,
            beta,
            RunningStats {
                mean: &mut mean,
                var: &mut var,
                momentum: T::from_f64(BN_MOMENTUM),
            },
            training,
            T::from_f64(NORM_EPS),
        )?;
        if training {
            let back = |v: Vec<T>| v.into_iter().map(Scalar::to_f32).collect();
            f.stat_updates.push((self.running_mean, back(mean)));
            f.stat_updates.push((self.running_var, back(var)));
        }
        Ok(y)
    }

    pub fn trace(&self, t: &mut Tracer, store: &ParamStore, input: &[usize]) -> Result<Vec<usize>> {
        let (_, c, _, _) = dims4("batch_norm", input)?;
        if c != self.channels {
            return Err(Error::shape("batch_norm", format!("{c} != {}", self.channels)));
        }
        t.push(&store.layer(self.layer).name, "batch_norm", input.to_vec(), 0);
        Ok(input.to_vec())
    }
}

/// Convolution, optional batch norm, optional activation.
#[derive(Debug, Clone)]
pub struct ConvUnit {
    pub conv: Conv,
    pub norm: Option<BatchNorm>,
    pub act: Option<Activation>,
}

impl ConvUnit {
    /// Bias-free conv followed by batch norm (`norm = true`) or a plain
    /// bias-free conv.
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        init: &mut Initializer,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        groups: usize,
        norm: bool,
        act: Option<Activation>,
    ) -> Self {
        let kind = if groups > 1 && groups == in_channels {
            LayerKind::DepthwiseConv
        } else if kernel == 1 {
            LayerKind::PointwiseConv
        } else {
            LayerKind::Conv
        };
        let conv = Conv::new(
            store,
            init,
            &format!("{name}.conv"),
            kind,
            in_channels,
            out_channels,
            kernel,
            stride,
            groups,
            false,
        );
        let norm = norm.then(|| BatchNorm::new(store, init, &format!("{name}.bn"), out_channels));
        ConvUnit { conv, norm, act }
    }

    pub fn forward<T: Scalar>(&self, f: &mut Forward<'_, T>, x: Var) -> Result<Var> {
        let mut y = self.conv.forward(f, x)?;
        if let Some(bn) = &self.norm {
            y = bn.forward(f, y)?;
        }
        if let Some(act) = self.act {
            y = f.tape.activation(y, act)?;
        }
        Ok(y)
    }

    pub fn trace(&self, t: &mut Tracer, store: &ParamStore, input: &[usize]) -> Result<Vec<usize>> {
        let out = self.conv.trace(t, store, input)?;
        match &self.norm {
            Some(bn) => bn.trace(t, store, &out),
            None => Ok(out),
        }
    }
}

#[derive(Debug, Clone)]
pub struct Linear {
    pub layer: LayerId,
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub in_features: usize,
    pub out_features: usize,
}

impl Linear {
    pub fn new(
        store: &mut ParamStore,
        init: &mut Initializer,
        name: &str,
        kind: LayerKind,
        in_features: usize,
        out_features: usize,
    ) -> Self {
        let layer = store.add_layer(name, kind);
        let weight = store.add(
            layer,
            "weight",
            ParamRole::Weight,
            &[out_features, in_features],
            InitKind::TruncNormal {
                std: LINEAR_INIT_STD,
            },
            init,
        );
        let bias = Some(store.add(layer, "bias", ParamRole::Bias, &[out_features], InitKind::Zeros, init));
        Linear {
            layer,
            weight,
            bias,
            in_features,
            out_features,
        }
    }

    pub fn forward<T: Scalar>(&self, f: &mut Forward<'_, T>, x: Var) -> Result<Var> {
        let w = f.param(self.weight);
        let b = self.bias.map(|b| f.param(b));
        f.tape.linear(x, w, b)
    }

    pub fn vars<T: Scalar>(&self, f: &mut Forward<'_, T>) -> (Var, Option<Var>) {
        (f.param(self.weight), self.bias.map(|b| f.param(b)))
    }

    pub fn trace(&self, t: &mut Tracer, store: &ParamStore, input: &[usize]) -> Result<Vec<usize>> {
        if input.last() != Some(&self.in_features) {
            return Err(Error::shape(
                "linear",
                format!("input {input:?} does not end in {}", self.in_features),
            ));
        }
        let mut out = input.to_vec();
        *out.last_mut().unwrap() = self.out_features;
        let rows: usize = input[..input.len() - 1].iter().product();
        let meta = store.layer(self.layer);
        t.push(
            &meta.name,
            meta.kind.as_str(),
            out.clone(),
            (rows * self.in_features * self.out_features) as u64,
        );
        Ok(out)
    }
}

#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub layer: LayerId,
    pub gamma: ParamId,
    pub beta: ParamId,
    pub dim: usize,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, init: &mut Initializer, name: &str, dim: usize) -> Self {
        let layer = store.add_layer(name, LayerKind::LayerNorm);
        LayerNorm {
            layer,
            gamma: store.add(layer, "gamma", ParamRole::NormScale, &[dim], InitKind::Ones, init),
            beta: store.add(layer, "beta", ParamRole::NormShift, &[dim], InitKind::Zeros, init),
            dim,
        }
    }

    pub fn forward<T: Scalar>(&self, f: &mut Forward<'_, T>, x: Var) -> Result<Var> {
        let g = f.param(self.gamma);
        let b = f.param(self.beta);
        f.tape.layer_norm(x, g, b, T::from_f64(NORM_EPS))
    }

    pub fn trace(&self, t: &mut Tracer, store: &ParamStore, input: &[usize]) -> Result<Vec<usize>> {
        if input.last() != Some(&self.dim) {
            return Err(Error::shape("layer_norm", format!("{input:?} does not end in {}", self.dim)));
        }
        t.push(&store.layer(self.layer).name, "layer_norm", input.to_vec(), 0);
        Ok(input.to_vec())
    }
}
