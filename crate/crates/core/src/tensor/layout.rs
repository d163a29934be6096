//! Shape-moving primitives: patch unfold/fold, pooling, concatenation.

use super::tape::{GradSink, Op, Var};
use super::{Scalar, Tape, Tensor};
use crate::error::{Error, Result};

/// Index map between `[B, C, H, W]` and the unfolded `[B·ph·pw, N, C]`
/// layout, where sequence `b·ph·pw + py·pw + px` collects the pixel at
/// offset `(py, px)` of every patch and `N = (H/ph)·(W/pw)`.
#[derive(Clone, Copy)]
struct PatchLayout {
    batch: usize,
    channels: usize,
    height: usize,
    width: usize,
    patch_h: usize,
    patch_w: usize,
}

impl PatchLayout {
    fn new(
        op: &'static str,
        (batch, channels, height, width): (usize, usize, usize, usize),
        patch_h: usize,
        patch_w: usize,
    ) -> Result<Self> {
        if patch_h == 0 || patch_w == 0 || height % patch_h != 0 || width % patch_w != 0 {
            return Err(Error::shape(
                op,
                format!("spatial {height}x{width} is not divisible by patch {patch_h}x{patch_w}"),
            ));
        }
        Ok(PatchLayout {
            batch,
            channels,
            height,
            width,
            patch_h,
            patch_w,
        })
    }

    fn unfolded_shape(&self) -> Vec<usize> {
        let n = (self.height / self.patch_h) * (self.width / self.patch_w);
        vec![self.batch * self.patch_h * self.patch_w, n, self.channels]
    }

    /// Calls `f(image_index, unfolded_index)` for every element.
    fn for_each(&self, mut f: impl FnMut(usize, usize)) {
        let (nh, nw) = (self.height / self.patch_h, self.width / self.patch_w);
        let n = nh * nw;
        let c = self.channels;
        for b in 0..self.batch {
            for ch in 0..c {
                for y in 0..self.height {
                    let (iy, py) = (y / self.patch_h, y % self.patch_h);
                    for x in 0..self.width {
                        let (ix, px) = (x / self.patch_w, x % self.patch_w);
                        let seq = (b * self.patch_h + py) * self.patch_w + px;
                        let tok = iy * nw + ix;
                        let img = ((b * c + ch) * self.height + y) * self.width + x;
                        f(img, (seq * n + tok) * c + ch);
                    }
                }
            }
        }
    }

    fn unfold<T: Scalar>(&self, src: &[T], dst: &mut [T], accumulate: bool) {
        self.for_each(|img, seq| {
            if accumulate {
                dst[seq] += src[img];
            } else {
                dst[seq] = src[img];
            }
        });
    }

    fn fold<T: Scalar>(&self, src: &[T], dst: &mut [T], accumulate: bool) {
        self.for_each(|img, seq| {
            if accumulate {
                dst[img] += src[seq];
            } else {
                dst[img] = src[seq];
            }
        });
    }
}

impl<T: Scalar> Tape<T> {
    /// `[B, C, H, W]` → `[B·ph·pw, (H/ph)·(W/pw), C]`.
    pub fn unfold_patches(&mut self, input: Var, patch_h: usize, patch_w: usize) -> Result<Var> {
        self.check(input)?;
        let x = self.value(input);
        let layout = PatchLayout::new("unfold_patches", x.dims4("unfold_patches")?, patch_h, patch_w)?;
        let mut out = vec![T::zero(); x.numel()];
        layout.unfold(x.data(), &mut out, false);
        let value = Tensor::new(layout.unfolded_shape(), out)?;
        self.push(
            "unfold_patches",
            value,
            &[input],
            Op::Unfold {
                input,
                patch_h,
                patch_w,
            },
        )
    }

    /// Inverse of [`unfold_patches`](Self::unfold_patches) back to an
    /// `height × width` image.
    pub fn fold_patches(
        &mut self,
        input: Var,
        patch_h: usize,
        patch_w: usize,
        height: usize,
        width: usize,
    ) -> Result<Var> {
        self.check(input)?;
        let x = self.value(input);
        let (seqs, n, c) = match *x.shape() {
            [s, n, c] => (s, n, c),
            _ => {
                return Err(Error::shape(
                    "fold_patches",
                    format!("expected [B·ph·pw, N, C], got {:?}", x.shape()),
                ))
            }
        };
        let per_image = patch_h * patch_w;
        if per_image == 0 || seqs % per_image != 0 {
            return Err(Error::shape(
                "fold_patches",
                format!("{seqs} sequences is not a multiple of patch area {per_image}"),
            ));
        }
        let batch = seqs / per_image;
        let layout = PatchLayout::new("fold_patches", (batch, c, height, width), patch_h, patch_w)?;
        if layout.unfolded_shape() != [seqs, n, c] {
            return Err(Error::shape(
                "fold_patches",
                format!("{:?} cannot fold into {height}x{width}", x.shape()),
            ));
        }
        let mut out = vec![T::zero(); x.numel()];
        layout.fold(x.data(), &mut out, false);
        let value = Tensor::new(vec![batch, c, height, width], out)?;
        self.push(
            "fold_patches",
            value,
            &[input],
            Op::Fold {
                input,
                patch_h,
                patch_w,
            },
        )
    }

    /// `[B, C, H, W]` → `[B, C]` by spatial mean.
    pub fn global_avg_pool(&mut self, input: Var) -> Result<Var> {
        self.check(input)?;
        let x = self.value(input);
        let (b, c, h, w) = x.dims4("global_avg_pool")?;
        let plane = h * w;
        if plane == 0 {
            return Err(Error::shape("global_avg_pool", "empty spatial extent"));
        }
        let n = T::from_f64(plane as f64);
        let out = x
            .data()
            .chunks(plane)
            .map(|p| p.iter().copied().sum::<T>() / n)
            .collect();
        let value = Tensor::new(vec![b, c], out)?;
        self.push("global_avg_pool", value, &[input], Op::GlobalAvgPool { input })
    }

    /// Concatenation along axis 1, parts laid end to end in list order.
    pub fn concat_channels(&mut self, parts: &[Var]) -> Result<Var> {
        self.check_all(parts)?;
        let first = parts
            .first()
            .ok_or_else(|| Error::shape("concat_channels", "empty list"))?;
        let head = self.value(*first).shape().to_vec();
        if head.len() < 2 {
            return Err(Error::shape(
                "concat_channels",
                format!("parts must have rank >= 2, got {head:?}"),
            ));
        }
        let batch = head[0];
        let tail = &head[2..];
        let inner: usize = tail.iter().product();
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let s = self.value(p).shape();
            if s.len() != head.len() || s[0] != batch || &s[2..] != tail {
                return Err(Error::shape(
                    "concat_channels",
                    format!("part {s:?} does not match {head:?} outside axis 1"),
                ));
            }
            widths.push(s[1]);
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(batch * total * inner);
        for b in 0..batch {
            for (&p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.value(p).data()[b * w * inner..(b + 1) * w * inner]);
            }
        }
        let mut shape = head.clone();
        shape[1] = total;
        let value = Tensor::new(shape, out)?;
        self.push(
            "concat_channels",
            value,
            parts,
            Op::Concat {
                parts: parts.to_vec(),
            },
        )
    }
}

pub(crate) fn unfold_backward<T: Scalar>(
    input: Var,
    patch_h: usize,
    patch_w: usize,
    gy: &[T],
    sink: &mut GradSink<'_, T>,
) {
    if !sink.wants(input) {
        return;
    }
    let dims = sink.value(input).dims4("unfold_patches").expect("validated");
    let layout = PatchLayout::new("unfold_patches", dims, patch_h, patch_w).expect("validated");
    layout.fold(gy, sink.slot(input), true);
}

pub(crate) fn fold_backward<T: Scalar>(
    input: Var,
    out: &Tensor<T>,
    patch_h: usize,
    patch_w: usize,
    gy: &[T],
    sink: &mut GradSink<'_, T>,
) {
    if !sink.wants(input) {
        return;
    }
    let dims = out.dims4("fold_patches").expect("validated");
    let layout = PatchLayout::new("fold_patches", dims, patch_h, patch_w).expect("validated");
    layout.unfold(gy, sink.slot(input), true);
}

pub(crate) fn gap_backward<T: Scalar>(input: Var, gy: &[T], sink: &mut GradSink<'_, T>) {
    if !sink.wants(input) {
        return;
    }
    let (_, _, h, w) = sink.value(input).dims4("global_avg_pool").expect("validated");
    let plane = h * w;
    let n = T::from_f64(plane as f64);
    let gx = sink.slot(input);
    for (chunk, &g) in gx.chunks_mut(plane).zip(gy) {
        let v = g / n;
        chunk.iter_mut().for_each(|s| *s += v);
    }
}

pub(crate) fn concat_backward<T: Scalar>(
    parts: &[Var],
    out: &Tensor<T>,
    gy: &[T],
    sink: &mut GradSink<'_, T>,
) {
    let batch = out.shape()[0];
    let inner: usize = out.shape()[2..].iter().product();
    let total = out.shape()[1];
    let mut offset = 0;
    for &p in parts {
        let w = sink.value(p).shape()[1];
        if sink.wants(p) {
            let gp = sink.slot(p);
            for b in 0..batch {
                let src = &gy[(b * total + offset) * inner..][..w * inner];
                for (s, &g) in gp[b * w * inner..(b + 1) * w * inner].iter_mut().zip(src) {
                    *s += g;
                }
            }
        }
        offset += w;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unfold_two_by_two_enumeration() {
        let mut t: Tape<f32> = Tape::new();
        let x = t.leaf(Tensor::new(vec![1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let u = t.unfold_patches(x, 2, 2).unwrap();
        assert_eq!(t.shape(u), &[4, 1, 1]);
        assert_eq!(t.value(u).data(), &[1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn unit_patch_unfold_is_channel_last_reshape() {
        let mut t: Tape<f32> = Tape::new();
        let src = Tensor::from_fn(vec![1, 3, 2, 2], |i| i as f32);
        let x = t.leaf(src.clone());
        let u = t.unfold_patches(x, 1, 1).unwrap();
        assert_eq!(t.shape(u), &[1, 4, 3]);
        // token (y, x), channel c
        assert_eq!(t.value(u).at(&[0, 1, 2]), src.at(&[0, 2, 0, 1]));
        let f = t.fold_patches(u, 1, 1, 2, 2).unwrap();
        assert_eq!(t.value(f).data(), src.data());
    }

    #[test]
    fn indivisible_extent_rejected() {
        let mut t: Tape<f32> = Tape::new();
        let x = t.leaf(Tensor::zeros(vec![1, 1, 3, 4]));
        assert!(matches!(t.unfold_patches(x, 2, 2), Err(Error::Shape { .. })));
    }

    #[test]
    fn gap_cases() {
        let mut t: Tape<f32> = Tape::new();
        let x = t.leaf(Tensor::new(vec![1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let g = t.global_avg_pool(x).unwrap();
        assert_eq!(t.value(g).data(), &[2.5]);
        let x = t.leaf(Tensor::full(vec![2, 3, 5, 7], 0.375));
        let g = t.global_avg_pool(x).unwrap();
        assert!(t.value(g).data().iter().all(|&v| v == 0.375));
        let src = Tensor::from_fn(vec![2, 3, 1, 1], |i| i as f32 - 1.5);
        let x = t.leaf(src.clone());
        let g = t.global_avg_pool(x).unwrap();
        assert_eq!(t.value(g).data(), src.data());
    }

    #[test]
    fn concat_order_and_errors() {
        let mut t: Tape<f32> = Tape::new();
        let a = t.leaf(Tensor::new(vec![1, 2], vec![1.0, 2.0]).unwrap());
        let b = t.leaf(Tensor::new(vec![1, 1], vec![3.0]).unwrap());
        let c = t.concat_channels(&[a, b]).unwrap();
        assert_eq!(t.value(c).data(), &[1.0, 2.0, 3.0]);
        let single = t.concat_channels(&[a]).unwrap();
        assert_eq!(t.value(single).data(), &[1.0, 2.0]);
        assert!(t.concat_channels(&[]).is_err());
        let d = t.leaf(Tensor::zeros(vec![2, 1]));
        assert!(t.concat_channels(&[a, d]).is_err());

        let parts: Vec<Var> = [32, 128, 480]
            .iter()
            .map(|&w| t.leaf(Tensor::zeros(vec![2, w])))
            .collect();
        let cat = t.concat_channels(&parts).unwrap();
        assert_eq!(t.shape(cat), &[2, 640]);
    }

    #[test]
    fn concat_rank4_interleaves_per_batch() {
        let mut t: Tape<f32> = Tape::new();
        let a = t.leaf(Tensor::from_fn(vec![2, 1, 1, 2], |i| i as f32));
        let b = t.leaf(Tensor::from_fn(vec![2, 2, 1, 2], |i| 10.0 + i as f32));
        let c = t.concat_channels(&[a, b]).unwrap();
        assert_eq!(t.shape(c), &[2, 3, 1, 2]);
        assert_eq!(
            t.value(c).data(),
            &[0.0, 1.0, 10.0, 11.0, 12.0, 13.0, 2.0, 3.0, 14.0, 15.0, 16.0, 17.0]
        );
    }
}
