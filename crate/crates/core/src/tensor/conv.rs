use super::kernels::{gemm_nn, gemm_nt, gemm_tn, ConvGeometry};
use super::tape::{GradSink, Op, Var};
use super::{Scalar, Tape, Tensor};
use crate::error::{Error, Result};

pub(crate) struct ConvSaved {
    input: Var,
    weight: Var,
    bias: Option<Var>,
    geom: ConvGeometry,
    groups: usize,
}

/// Static description of a conv2d call after validation.
struct ConvPlan {
    batch: usize,
    in_channels: usize,
    out_channels: usize,
    groups: usize,
    geom: ConvGeometry,
}

impl ConvPlan {
    fn in_per_group(&self) -> usize {
        self.in_channels / self.groups
    }

    fn out_per_group(&self) -> usize {
        self.out_channels / self.groups
    }

    /// Rows of the per-group column matrix.
    fn patch_len(&self) -> usize {
        self.in_per_group() * self.geom.kernel_h * self.geom.kernel_w
    }

    fn is_depthwise(&self) -> bool {
        self.groups > 1 && self.groups == self.in_channels && self.groups == self.out_channels
    }
}

fn plan<T: Scalar>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    stride: usize,
    padding: usize,
    groups: usize,
) -> Result<ConvPlan> {
    let (batch, in_channels, h, w) = input.dims4("conv2d")?;
    let (out_channels, in_per_group, kh, kw) = weight.dims4("conv2d")?;
    if groups == 0 || in_channels % groups != 0 || out_channels % groups != 0 {
        return Err(Error::shape(
            "conv2d",
            format!(
                "groups={groups} must divide input channels {in_channels} and output channels {out_channels}"
            ),
        ));
    }
    if in_per_group != in_channels / groups {
        return Err(Error::shape(
            "conv2d",
            format!(
                "weight expects {in_per_group} input channels per group, input provides {}",
                in_channels / groups
            ),
        ));
    }
    if let Some(b) = bias {
        if b.shape() != [out_channels] {
            return Err(Error::shape(
                "conv2d",
                format!("bias shape {:?} != [{out_channels}]", b.shape()),
            ));
        }
    }
    let geom = ConvGeometry::new(h, w, kh, kw, stride, padding).ok_or_else(|| {
        Error::shape(
            "conv2d",
            format!("{kh}x{kw} kernel with stride {stride} does not fit {h}x{w} input padded by {padding}"),
        )
    })?;
    Ok(ConvPlan {
        batch,
        in_channels,
        out_channels,
        groups,
        geom,
    })
}

impl<T: Scalar> Tape<T> {
    /// 2-D cross-correlation with zero padding and channel groups.
    ///
    /// `weight` is `[out, in/groups, kh, kw]`. `groups == in == out` is a
    /// depthwise convolution.
    pub fn conv2d(
        &mut self,
        input: Var,
        weight: Var,
        bias: Option<Var>,
        stride: usize,
        padding: usize,
        groups: usize,
    ) -> Result<Var> {
        self.check_all(&[input, weight])?;
        if let Some(b) = bias {
            self.check(b)?;
        }
        let x = self.value(input);
        let wt = self.value(weight);
        let bt = bias.map(|b| self.value(b));
        let p = plan(x, wt, bt, stride, padding, groups)?;
        let out = conv_forward(&p, x.data(), wt.data(), bt.map(|b| b.data()));
        let value = Tensor::new(
            vec![p.batch, p.out_channels, p.geom.out_h, p.geom.out_w],
            out,
        )?;
        let mut inputs = vec![input, weight];
        inputs.extend(bias);
        self.push(
            "conv2d",
            value,
            &inputs,
            Op::Conv2d(ConvSaved {
                input,
                weight,
                bias,
                geom: p.geom,
                groups,
            }),
        )
    }

    /// `input · weightᵀ + bias` over the last axis of `input`.
    pub fn linear(&mut self, input: Var, weight: Var, bias: Option<Var>) -> Result<Var> {
        self.check_all(&[input, weight])?;
        if let Some(b) = bias {
            self.check(b)?;
        }
        let x = self.value(input);
        let wt = self.value(weight);
        let (d_out, d_in) = match *wt.shape() {
            [o, i] => (o, i),
            _ => {
                return Err(Error::shape(
                    "linear",
                    format!("weight must be [out, in], got {:?}", wt.shape()),
                ))
            }
        };
        let last = x.shape().last().copied().unwrap_or(0);
        if x.rank() == 0 || last != d_in {
            return Err(Error::shape(
                "linear",
                format!("input {:?} does not end in {d_in}", x.shape()),
            ));
        }
        let rows = x.numel() / d_in;
        let mut out = vec![T::zero(); rows * d_out];
        if let Some(b) = bias {
            let bv = self.value(b);
            if bv.shape() != [d_out] {
                return Err(Error::shape(
                    "linear",
                    format!("bias shape {:?} != [{d_out}]", bv.shape()),
                ));
            }
            for row in out.chunks_mut(d_out) {
                row.copy_from_slice(bv.data());
            }
        }
        gemm_nt(x.data(), wt.data(), &mut out, rows, d_in, d_out);
        let mut shape = x.shape().to_vec();
        *shape.last_mut().unwrap() = d_out;
        let value = Tensor::new(shape, out)?;
        let mut inputs = vec![input, weight];
        inputs.extend(bias);
        self.push(
            "linear",
            value,
            &inputs,
            Op::Linear {
                input,
                weight,
                bias,
            },
        )
    }
}

fn conv_forward<T: Scalar>(p: &ConvPlan, x: &[T], w: &[T], bias: Option<&[T]>) -> Vec<T> {
    let g = &p.geom;
    let in_plane = g.in_h * g.in_w;
    let out_plane = g.out_spatial();
    let mut out = vec![T::zero(); p.batch * p.out_channels * out_plane];

    if p.is_depthwise() {
        let ksz = g.kernel_h * g.kernel_w;
        for b in 0..p.batch {
            for c in 0..p.in_channels {
                let src = &x[(b * p.in_channels + c) * in_plane..][..in_plane];
                let dst = &mut out[(b * p.out_channels + c) * out_plane..][..out_plane];
                let bias_c = bias.map_or(T::zero(), |bs| bs[c]);
                g.depthwise_plane(src, &w[c * ksz..(c + 1) * ksz], bias_c, dst);
            }
        }
        return out;
    }

    let (cin_g, cout_g, k) = (p.in_per_group(), p.out_per_group(), p.patch_len());
    let mut cols = if g.is_pointwise() {
        Vec::new()
    } else {
        vec![T::zero(); k * out_plane]
    };
    for b in 0..p.batch {
        for grp in 0..p.groups {
            let src = &x[(b * p.in_channels + grp * cin_g) * in_plane..][..cin_g * in_plane];
            let dst = &mut out[(b * p.out_channels + grp * cout_g) * out_plane..][..cout_g * out_plane];
            if let Some(bs) = bias {
                for (oc, plane) in dst.chunks_mut(out_plane).enumerate() {
                    plane.fill(bs[grp * cout_g + oc]);
                }
            }
            let wg = &w[grp * cout_g * k..(grp + 1) * cout_g * k];
            if g.is_pointwise() {
                gemm_nn(wg, src, dst, cout_g, k, out_plane);
            } else {
                g.im2col(src, cin_g, &mut cols);
                gemm_nn(wg, &cols, dst, cout_g, k, out_plane);
            }
        }
    }
    out
}

impl ConvSaved {
    pub(crate) fn backward<T: Scalar>(&self, gy: &[T], sink: &mut GradSink<'_, T>) {
        let x = sink.value(self.input);
        let w = sink.value(self.weight);
        let (batch, in_channels, _, _) = x.dims4("conv2d").expect("validated in forward");
        let out_channels = w.shape()[0];
        let p = ConvPlan {
            batch,
            in_channels,
            out_channels,
            groups: self.groups,
            geom: self.geom,
        };
        let g = &p.geom;
        let in_plane = g.in_h * g.in_w;
        let out_plane = g.out_spatial();
        let x = x.data();
        let w = w.data();

        if let Some(bias) = self.bias {
            if sink.wants(bias) {
                let gb = sink.slot(bias);
                for b in 0..batch {
                    for (oc, gbv) in gb.iter_mut().enumerate() {
                        let plane = &gy[(b * out_channels + oc) * out_plane..][..out_plane];
                        *gbv += plane.iter().copied().sum::<T>();
                    }
                }
            }
        }
        let want_x = sink.wants(self.input);
        let want_w = sink.wants(self.weight);
        let mut gx = want_x.then(|| vec![T::zero(); x.len()]);
        let mut gw = want_w.then(|| vec![T::zero(); w.len()]);

        if p.is_depthwise() {
            let ksz = g.kernel_h * g.kernel_w;
            for b in 0..batch {
                for c in 0..in_channels {
                    let off_in = (b * in_channels + c) * in_plane;
                    let off_out = (b * out_channels + c) * out_plane;
                    g.depthwise_plane_backward(
                        &x[off_in..off_in + in_plane],
                        &w[c * ksz..(c + 1) * ksz],
                        &gy[off_out..off_out + out_plane],
                        gx.as_mut().map(|v| &mut v[off_in..off_in + in_plane]),
                        gw.as_mut().map(|v| &mut v[c * ksz..(c + 1) * ksz]),
                    );
                }
            }
        } else {
            let (cin_g, cout_g, k) = (p.in_per_group(), p.out_per_group(), p.patch_len());
            let pointwise = g.is_pointwise();
            let mut cols = vec![T::zero(); if pointwise { 0 } else { k * out_plane }];
            let mut gcols = vec![T::zero(); if pointwise { 0 } else { k * out_plane }];
            for b in 0..batch {
                for grp in 0..p.groups {
                    let off_in = (b * in_channels + grp * cin_g) * in_plane;
                    let src = &x[off_in..off_in + cin_g * in_plane];
                    let dy = &gy[(b * out_channels + grp * cout_g) * out_plane..][..cout_g * out_plane];
                    let wg = &w[grp * cout_g * k..(grp + 1) * cout_g * k];
                    if let Some(gw) = gw.as_mut() {
                        let gwg = &mut gw[grp * cout_g * k..(grp + 1) * cout_g * k];
                        if pointwise {
                            gemm_nt(dy, src, gwg, cout_g, out_plane, k);
                        } else {
                            g.im2col(src, cin_g, &mut cols);
                            gemm_nt(dy, &cols, gwg, cout_g, out_plane, k);
                        }
                    }
                    if let Some(gx) = gx.as_mut() {
                        let gsrc = &mut gx[off_in..off_in + cin_g * in_plane];
                        if pointwise {
                            gemm_tn(wg, dy, gsrc, k, cout_g, out_plane);
                        } else {
                            gcols.fill(T::zero());
                            gemm_tn(wg, dy, &mut gcols, k, cout_g, out_plane);
                            g.col2im(&gcols, cin_g, gsrc);
                        }
                    }
                }
            }
        }
        if let Some(gx) = gx {
            sink.add(self.input, &gx);
        }
        if let Some(gw) = gw {
            sink.add(self.weight, &gw);
        }
    }
}

pub(crate) fn linear_backward<T: Scalar>(
    input: Var,
    weight: Var,
    bias: Option<Var>,
    gy: &[T],
    sink: &mut GradSink<'_, T>,
) {
    let (d_out, d_in) = {
        let s = sink.value(weight).shape();
        (s[0], s[1])
    };
    let rows = gy.len() / d_out;
    if let Some(b) = bias {
        if sink.wants(b) {
            let gb = sink.slot(b);
            for row in gy.chunks(d_out) {
                for (s, &v) in gb.iter_mut().zip(row) {
                    *s += v;
                }
            }
        }
    }
    if sink.wants(weight) {
        let x = sink.value(input).data();
        gemm_tn(gy, x, sink.slot(weight), d_out, rows, d_in);
    }
    if sink.wants(input) {
        let w = sink.value(weight).data();
        gemm_nn(gy, w, sink.slot(input), rows, d_out, d_in);
    }
}
