//! Dense inner loops. All accumulate into `c` in a fixed order.

use super::Scalar;

/// `c[m,n] += a[m,k] · b[k,n]`
pub fn gemm_nn<T: Scalar>(a: &[T], b: &[T], c: &mut [T], m: usize, k: usize, n: usize) {
    debug_assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    for i in 0..m {
        let c_row = &mut c[i * n..(i + 1) * n];
        for p in 0..k {
            let a_ip = a[i * k + p];
            if a_ip == T::zero() {
                continue;
            }
            let b_row = &b[p * n..(p + 1) * n];
            for (cv, &bv) in c_row.iter_mut().zip(b_row) {
                *cv += a_ip * bv;
            }
        }
    }
}

/// `c[m,n] += a[m,k] · b[n,k]ᵀ`
pub fn gemm_nt<T: Scalar>(a: &[T], b: &[T], c: &mut [T], m: usize, k: usize, n: usize) {
    debug_assert!(a.len() >= m * k && b.len() >= n * k && c.len() >= m * n);
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let b_row = &b[j * k..(j + 1) * k];
            c[i * n + j] += dot(a_row, b_row);
        }
    }
}

/// `c[m,n] += a[k,m]ᵀ · b[k,n]`
pub fn gemm_tn<T: Scalar>(a: &[T], b: &[T], c: &mut [T], m: usize, k: usize, n: usize) {
    debug_assert!(a.len() >= k * m && b.len() >= k * n && c.len() >= m * n);
    for p in 0..k {
        let b_row = &b[p * n..(p + 1) * n];
        for i in 0..m {
            let a_pi = a[p * m + i];
            if a_pi == T::zero() {
                continue;
            }
            let c_row = &mut c[i * n..(i + 1) * n];
            for (cv, &bv) in c_row.iter_mut().zip(b_row) {
                *cv += a_pi * bv;
            }
        }
    }
}

/// Sequential dot product with four independent partial sums.
#[inline]
pub fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    let n = a.len().min(b.len());
    let chunks = n / 4;
    let mut acc = [T::zero(); 4];
    for c in 0..chunks {
        let i = c * 4;
        acc[0] += a[i] * b[i];
        acc[1] += a[i + 1] * b[i + 1];
        acc[2] += a[i + 2] * b[i + 2];
        acc[3] += a[i + 3] * b[i + 3];
    }
    let mut tail = T::zero();
    for i in chunks * 4..n {
        tail += a[i] * b[i];
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

/// Spatial geometry of a 2-D convolution window.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeometry {
    pub in_h: usize,
    pub in_w: usize,
    pub kernel_h: usize,
    pub kernel_w: usize,
    pub stride: usize,
    pub padding: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeometry {
    /// `None` when the kernel does not fit the padded input or stride is 0.
    pub fn new(
        in_h: usize,
        in_w: usize,
        kernel_h: usize,
        kernel_w: usize,
        stride: usize,
        padding: usize,
    ) -> Option<Self> {
        if stride == 0 || kernel_h == 0 || kernel_w == 0 {
            return None;
        }
        let ph = in_h + 2 * padding;
        let pw = in_w + 2 * padding;
        if kernel_h > ph || kernel_w > pw {
            return None;
        }
        Some(ConvGeometry {
            in_h,
            in_w,
            kernel_h,
            kernel_w,
            stride,
            padding,
            out_h: (ph - kernel_h) / stride + 1,
            out_w: (pw - kernel_w) / stride + 1,
        })
    }

    pub fn out_spatial(&self) -> usize {
        self.out_h * self.out_w
    }

    /// True for 1×1 kernels with unit stride and no padding, where the
    /// column matrix is the input itself.
    pub fn is_pointwise(&self) -> bool {
        self.kernel_h == 1 && self.kernel_w == 1 && self.stride == 1 && self.padding == 0
    }

    /// Source pixel for output position `o` and kernel tap `k`, or `None`
    /// when it falls in the zero padding.
    #[inline]
    fn source(&self, o: usize, k: usize, stride_extent: usize) -> Option<usize> {
        let pos = (o * self.stride + k) as isize - self.padding as isize;
        if pos < 0 || pos as usize >= stride_extent {
            None
        } else {
            Some(pos as usize)
        }
    }

    /// Expands `channels` planes of `input` into `[channels·kh·kw, out_h·out_w]`.
    pub fn im2col<T: Scalar>(&self, input: &[T], channels: usize, cols: &mut [T]) {
        let plane = self.in_h * self.in_w;
        let out = self.out_spatial();
        let mut row = 0;
        for c in 0..channels {
            let src = &input[c * plane..(c + 1) * plane];
            for ky in 0..self.kernel_h {
                for kx in 0..self.kernel_w {
                    let dst = &mut cols[row * out..(row + 1) * out];
                    for oy in 0..self.out_h {
                        let sy = self.source(oy, ky, self.in_h);
                        for ox in 0..self.out_w {
                            dst[oy * self.out_w + ox] = match (sy, self.source(ox, kx, self.in_w)) {
                                (Some(y), Some(x)) => src[y * self.in_w + x],
                                _ => T::zero(),
                            };
                        }
                    }
                    row += 1;
                }
            }
        }
    }

    /// Adjoint of [`im2col`](Self::im2col): scatters columns back onto planes.
    pub fn col2im<T: Scalar>(&self, cols: &[T], channels: usize, output: &mut [T]) {
        let plane = self.in_h * self.in_w;
        let out = self.out_spatial();
        let mut row = 0;
        for c in 0..channels {
            let dst = &mut output[c * plane..(c + 1) * plane];
            for ky in 0..self.kernel_h {
                for kx in 0..self.kernel_w {
                    let src = &cols[row * out..(row + 1) * out];
                    for oy in 0..self.out_h {
                        let Some(y) = self.source(oy, ky, self.in_h) else {
                            continue;
                        };
                        for ox in 0..self.out_w {
                            if let Some(x) = self.source(ox, kx, self.in_w) {
                                dst[y * self.in_w + x] += src[oy * self.out_w + ox];
                            }
                        }
                    }
                    row += 1;
                }
            }
        }
    }

    /// Per-channel cross-correlation of one plane (depthwise forward).
    pub fn depthwise_plane<T: Scalar>(&self, src: &[T], kernel: &[T], bias: T, dst: &mut [T]) {
        for oy in 0..self.out_h {
            for ox in 0..self.out_w {
                let mut acc = T::zero();
                for ky in 0..self.kernel_h {
                    let Some(y) = self.source(oy, ky, self.in_h) else {
                        continue;
                    };
                    for kx in 0..self.kernel_w {
                        if let Some(x) = self.source(ox, kx, self.in_w) {
                            acc += src[y * self.in_w + x] * kernel[ky * self.kernel_w + kx];
                        }
                    }
                }
                dst[oy * self.out_w + ox] = acc + bias;
            }
        }
    }

    /// Depthwise backward for one plane: accumulates input and kernel grads.
    pub fn depthwise_plane_backward<T: Scalar>(
        &self,
        src: &[T],
        kernel: &[T],
        grad_out: &[T],
        grad_src: Option<&mut [T]>,
        grad_kernel: Option<&mut [T]>,
    ) {
        let mut grad_src = grad_src;
        let mut grad_kernel = grad_kernel;
        for oy in 0..self.out_h {
            for ox in 0..self.out_w {
                let g = grad_out[oy * self.out_w + ox];
                if g == T::zero() {
                    continue;
                }
                for ky in 0..self.kernel_h {
                    let Some(y) = self.source(oy, ky, self.in_h) else {
                        continue;
                    };
                    for kx in 0..self.kernel_w {
                        if let Some(x) = self.source(ox, kx, self.in_w) {
                            let k = ky * self.kernel_w + kx;
                            let s = y * self.in_w + x;
                            if let Some(gs) = grad_src.as_deref_mut() {
                                gs[s] += g * kernel[k];
                            }
                            if let Some(gk) = grad_kernel.as_deref_mut() {
                                gk[k] += g * src[s];
                            }
                        }
                    }
                }
            }
        }
    }
}
