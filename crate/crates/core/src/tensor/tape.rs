use std::sync::atomic::{AtomicU64, Ordering};

use super::attention::AttentionSaved;
use super::conv::ConvSaved;
use super::loss::CrossEntropySaved;
use super::norm::{BatchNormSaved, LayerNormSaved};
use super::pointwise::Activation;
use super::{Scalar, Tensor};
use crate::error::{Error, Result};

static NEXT_TAPE_ID: AtomicU64 = AtomicU64::new(1);

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var {
    pub(crate) index: usize,
    tape: u64,
}

pub(crate) enum Op<T> {
    Leaf,
    Conv2d(ConvSaved),
    Linear {
        input: Var,
        weight: Var,
        bias: Option<Var>,
    },
    BatchNorm(BatchNormSaved<T>),
    LayerNorm(LayerNormSaved<T>),
    Activation {
        input: Var,
        kind: Activation,
    },
    Softmax {
        input: Var,
    },
    Add {
        a: Var,
        b: Var,
    },
    Mul {
        a: Var,
        b: Var,
    },
    Scale {
        input: Var,
        factor: T,
    },
    Sum {
        input: Var,
    },
    Mean {
        input: Var,
    },
    Reshape {
        input: Var,
    },
    Concat {
        parts: Vec<Var>,
    },
    Unfold {
        input: Var,
        patch_h: usize,
        patch_w: usize,
    },
    Fold {
        input: Var,
        patch_h: usize,
        patch_w: usize,
    },
    GlobalAvgPool {
        input: Var,
    },
    Attention(AttentionSaved<T>),
    CrossEntropy(CrossEntropySaved<T>),
}

pub(crate) struct Node<T> {
    pub(crate) value: Tensor<T>,
    pub(crate) op: Op<T>,
    pub(crate) requires_grad: bool,
}

/// Gradient buffers being filled during a backward sweep.
pub(crate) struct GradSink<'a, T> {
    nodes: &'a [Node<T>],
    grads: &'a mut [Option<Vec<T>>],
}

impl<'a, T: Scalar> GradSink<'a, T> {
    pub(crate) fn wants(&self, v: Var) -> bool {
        self.nodes[v.index].requires_grad
    }

    pub(crate) fn value(&self, v: Var) -> &'a Tensor<T> {
        &self.nodes[v.index].value
    }

    /// Zero-initialised on first use. Callers check [`wants`](Self::wants) first.
    pub(crate) fn slot(&mut self, v: Var) -> &mut [T] {
        let n = self.nodes[v.index].value.numel();
        self.grads[v.index].get_or_insert_with(|| vec![T::zero(); n])
    }

    /// Adds `g` elementwise into the gradient of `v` if it is wanted.
    pub(crate) fn add(&mut self, v: Var, g: &[T]) {
        if self.wants(v) {
            for (s, &x) in self.slot(v).iter_mut().zip(g) {
                *s += x;
            }
        }
    }
}

/// Linear record of primitive applications for reverse-mode differentiation.
///
/// One tape per forward/backward pass. Values live on the tape and are
/// addressed through [`Var`] handles; a `Var` from another tape is rejected.
pub struct Tape<T: Scalar = f32> {
    id: u64,
    pub(crate) nodes: Vec<Node<T>>,
    record: bool,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape {
            id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
            record: true,
        }
    }

    /// A tape that keeps values but records nothing for backward.
    pub fn inference() -> Self {
        Tape {
            record: false,
            ..Self::new()
        }
    }

    pub fn is_recording(&self) -> bool {
        self.record
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Records an input. Its `requires_grad` flag decides whether backward
    /// populates a gradient for it.
    pub fn leaf(&mut self, tensor: Tensor<T>) -> Var {
        let requires_grad = self.record && tensor.requires_grad();
        self.nodes.push(Node {
            value: tensor,
            op: Op::Leaf,
            requires_grad,
        });
        self.var(self.nodes.len() - 1)
    }

    /// Records an input that never receives a gradient.
    pub fn constant(&mut self, tensor: Tensor<T>) -> Var {
        self.leaf(tensor.with_requires_grad(false))
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        self.check(v).expect("Var belongs to a different tape");
        &self.nodes[v.index].value
    }

    pub fn try_value(&self, v: Var) -> Result<&Tensor<T>> {
        self.check(v)?;
        Ok(&self.nodes[v.index].value)
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.value(v).shape()
    }

    /// Gradient populated by the last [`backward`](Self::backward) call.
    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.check(v).ok()?;
        self.nodes[v.index].value.grad()
    }

    pub fn take_value(&mut self, v: Var) -> Tensor<T> {
        self.check(v).expect("Var belongs to a different tape");
        std::mem::replace(&mut self.nodes[v.index].value, Tensor::zeros(Vec::new()))
    }

    pub(crate) fn check(&self, v: Var) -> Result<()> {
        if v.tape != self.id || v.index >= self.nodes.len() {
            return Err(Error::NotOnTape);
        }
        Ok(())
    }

    pub(crate) fn check_all(&self, vars: &[Var]) -> Result<()> {
        vars.iter().try_for_each(|&v| self.check(v))
    }

    fn var(&self, index: usize) -> Var {
        Var {
            index,
            tape: self.id,
        }
    }

    /// Appends the result of a primitive after validating finiteness.
    pub(crate) fn push(
        &mut self,
        name: &'static str,
        value: Tensor<T>,
        inputs: &[Var],
        op: Op<T>,
    ) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite { op: name });
        }
        let requires_grad = self.record && inputs.iter().any(|v| self.nodes[v.index].requires_grad);
        let op = if requires_grad { op } else { Op::Leaf };
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(self.var(self.nodes.len() - 1))
    }

    /// Reverse sweep from a scalar `loss`.
    ///
    /// Nodes are visited in exact reverse recording order. Every node that
    /// requires a gradient and lies upstream of `loss` has its gradient slot
    /// overwritten; leaves that do not contribute get an all-zero gradient.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        self.check(loss)?;
        let loss_value = &self.nodes[loss.index].value;
        if loss_value.numel() != 1 {
            return Err(Error::NotScalar(loss_value.shape().to_vec()));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.index] = Some(vec![T::one()]);

        let mut done: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        for i in (0..=loss.index).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else {
                continue;
            };
            let mut sink = GradSink {
                nodes: &self.nodes,
                grads: &mut grads,
            };
            propagate(&self.nodes[i], &g, &mut sink);
            done[i] = Some(g);
        }
        for (node, g) in self.nodes.iter_mut().zip(done) {
            if node.requires_grad {
                let g = g.unwrap_or_else(|| vec![T::zero(); node.value.numel()]);
                node.value.set_grad(g);
            }
        }
        Ok(())
    }
}

fn propagate<T: Scalar>(node: &Node<T>, g: &[T], sink: &mut GradSink<'_, T>) {
    let out = &node.value;
    match &node.op {
        Op::Leaf => {}
        Op::Conv2d(saved) => saved.backward(g, sink),
        Op::Linear {
            input,
            weight,
            bias,
        } => super::conv::linear_backward(*input, *weight, *bias, g, sink),
        Op::BatchNorm(saved) => saved.backward(g, sink),
        Op::LayerNorm(saved) => saved.backward(g, sink),
        Op::Activation { input, kind } => kind.backward(*input, g, sink),
        Op::Softmax { input } => super::pointwise::softmax_backward(*input, out, g, sink),
        Op::Add { a, b } => {
            sink.add(*a, g);
            sink.add(*b, g);
        }
        Op::Mul { a, b } => super::pointwise::mul_backward(*a, *b, g, sink),
        Op::Scale { input, factor } => {
            if sink.wants(*input) {
                for (s, &x) in sink.slot(*input).iter_mut().zip(g) {
                    *s += x * *factor;
                }
            }
        }
        Op::Sum { input } => {
            if sink.wants(*input) {
                let g0 = g[0];
                sink.slot(*input).iter_mut().for_each(|s| *s += g0);
            }
        }
        Op::Mean { input } => {
            if sink.wants(*input) {
                let n = T::from_f64(sink.value(*input).numel() as f64);
                let g0 = g[0] / n;
                sink.slot(*input).iter_mut().for_each(|s| *s += g0);
            }
        }
        Op::Reshape { input } => sink.add(*input, g),
        Op::Concat { parts } => super::layout::concat_backward(parts, out, g, sink),
        Op::Unfold {
            input,
            patch_h,
            patch_w,
        } => super::layout::unfold_backward(*input, *patch_h, *patch_w, g, sink),
        Op::Fold {
            input,
            patch_h,
            patch_w,
        } => super::layout::fold_backward(*input, out, *patch_h, *patch_w, g, sink),
        Op::GlobalAvgPool { input } => super::layout::gap_backward(*input, g, sink),
        Op::Attention(saved) => saved.backward(out, g, sink),
        Op::CrossEntropy(saved) => saved.backward(g, sink),
    }
}
