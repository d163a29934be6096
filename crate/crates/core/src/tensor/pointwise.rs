use super::tape::{GradSink, Op, Var};
use super::{Scalar, Tape, Tensor};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    /// `x · sigmoid(x)`
    Silu,
    Relu,
}

fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

impl Activation {
    pub fn apply<T: Scalar>(self, x: T) -> T {
        match self {
            Activation::Silu => x * sigmoid(x),
            Activation::Relu => x.max(T::zero()),
        }
    }

    fn derivative<T: Scalar>(self, x: T) -> T {
        match self {
            Activation::Silu => {
                let s = sigmoid(x);
                s * (T::one() + x * (T::one() - s))
            }
            Activation::Relu => {
                if x > T::zero() {
                    T::one()
                } else {
                    T::zero()
                }
            }
        }
    }

    pub(crate) fn backward<T: Scalar>(self, input: Var, gy: &[T], sink: &mut GradSink<'_, T>) {
        if !sink.wants(input) {
            return;
        }
        let x = sink.value(input).data();
        let gx = sink.slot(input);
        for i in 0..gy.len() {
            gx[i] += gy[i] * self.derivative(x[i]);
        }
    }
}

impl<T: Scalar> Tape<T> {
    pub fn activation(&mut self, input: Var, kind: Activation) -> Result<Var> {
        self.check(input)?;
        let x = self.value(input);
        let data = x.data().iter().map(|&v| kind.apply(v)).collect();
        let value = Tensor::new(x.shape().to_vec(), data)?;
        self.push("activation", value, &[input], Op::Activation { input, kind })
    }

    /// Softmax over the last axis, stabilised by subtracting the row maximum.
    pub fn softmax(&mut self, input: Var) -> Result<Var> {
        self.check(input)?;
        let x = self.value(input);
        let d = match x.shape().last() {
            Some(&d) if d > 0 => d,
            _ => {
                return Err(Error::shape(
                    "softmax",
                    format!("cannot take softmax of shape {:?}", x.shape()),
                ))
            }
        };
        let mut out = x.data().to_vec();
        out.chunks_mut(d).for_each(softmax_row);
        let value = Tensor::new(x.shape().to_vec(), out)?;
        self.push("softmax", value, &[input], Op::Softmax { input })
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.zip("add", a, b, |x, y| x + y)?;
        self.push("add", value, &[a, b], Op::Add { a, b })
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.zip("mul", a, b, |x, y| x * y)?;
        self.push("mul", value, &[a, b], Op::Mul { a, b })
    }

    pub fn scale(&mut self, input: Var, factor: T) -> Result<Var> {
        self.check(input)?;
        let x = self.value(input);
        let data = x.data().iter().map(|&v| v * factor).collect();
        let value = Tensor::new(x.shape().to_vec(), data)?;
        self.push("scale", value, &[input], Op::Scale { input, factor })
    }

    /// Sum of all elements as a rank-0 tensor.
    pub fn sum(&mut self, input: Var) -> Result<Var> {
        self.check(input)?;
        let s = self.value(input).data().iter().copied().sum::<T>();
        self.push("sum", Tensor::scalar(s), &[input], Op::Sum { input })
    }

    pub fn mean(&mut self, input: Var) -> Result<Var> {
        self.check(input)?;
        let x = self.value(input);
        if x.numel() == 0 {
            return Err(Error::shape("mean", "empty tensor"));
        }
        let s = x.data().iter().copied().sum::<T>() / T::from_f64(x.numel() as f64);
        self.push("mean", Tensor::scalar(s), &[input], Op::Mean { input })
    }

    pub fn reshape(&mut self, input: Var, shape: &[usize]) -> Result<Var> {
        self.check(input)?;
        let value = self.value(input).clone().reshape(shape.to_vec())?;
        self.push("reshape", value, &[input], Op::Reshape { input })
    }

    fn zip(&self, op: &'static str, a: Var, b: Var, f: impl Fn(T, T) -> T) -> Result<Tensor<T>> {
        self.check_all(&[a, b])?;
        let (x, y) = (self.value(a), self.value(b));
        if x.shape() != y.shape() {
            return Err(Error::shape(
                op,
                format!("{:?} vs {:?}", x.shape(), y.shape()),
            ));
        }
        let data = x.data().iter().zip(y.data()).map(|(&p, &q)| f(p, q)).collect();
        Tensor::new(x.shape().to_vec(), data)
    }
}

pub(crate) fn softmax_row<T: Scalar>(row: &mut [T]) {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let mut sum = T::zero();
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

pub(crate) fn softmax_backward<T: Scalar>(
    input: Var,
    out: &Tensor<T>,
    gy: &[T],
    sink: &mut GradSink<'_, T>,
) {
    if !sink.wants(input) {
        return;
    }
    let d = *out.shape().last().unwrap();
    let y = out.data();
    let gx = sink.slot(input);
    for r in 0..y.len() / d {
        let row = r * d..(r + 1) * d;
        let dotp: T = row.clone().map(|i| gy[i] * y[i]).sum();
        for i in row {
            gx[i] += y[i] * (gy[i] - dotp);
        }
    }
}

pub(crate) fn mul_backward<T: Scalar>(a: Var, b: Var, gy: &[T], sink: &mut GradSink<'_, T>) {
    let (x, y) = (sink.value(a).data(), sink.value(b).data());
    if sink.wants(a) {
        let ga: Vec<T> = gy.iter().zip(y).map(|(&g, &v)| g * v).collect();
        sink.add(a, &ga);
    }
    if sink.wants(b) {
        let gb: Vec<T> = gy.iter().zip(x).map(|(&g, &v)| g * v).collect();
        sink.add(b, &gb);
    }
}
