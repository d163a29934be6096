use super::kernels::{gemm_nn, gemm_nt, gemm_tn};
use super::pointwise::softmax_row;
use super::tape::{GradSink, Op, Var};
use super::{Scalar, Tape, Tensor};
use crate::error::{Error, Result};

pub(crate) struct AttentionSaved<T> {
    query: Var,
    key: Var,
    value: Var,
    heads: usize,
    /// `[B, heads, T, T]` attention weights.
    probs: Vec<T>,
}

/// Projection weights of one self-attention layer, all `[D, D]` / `[D]`.
#[derive(Debug, Clone, Copy)]
pub struct AttentionWeights {
    pub query: (Var, Option<Var>),
    pub key: (Var, Option<Var>),
    pub value: (Var, Option<Var>),
    pub output: (Var, Option<Var>),
}

#[derive(Clone, Copy)]
struct HeadLayout {
    tokens: usize,
    dim: usize,
    heads: usize,
}

impl HeadLayout {
    fn head_dim(&self) -> usize {
        self.dim / self.heads
    }

    fn gather<T: Scalar>(&self, src: &[T], b: usize, h: usize, dst: &mut [T]) {
        let hd = self.head_dim();
        for t in 0..self.tokens {
            let off = (b * self.tokens + t) * self.dim + h * hd;
            dst[t * hd..(t + 1) * hd].copy_from_slice(&src[off..off + hd]);
        }
    }

    fn scatter_add<T: Scalar>(&self, src: &[T], b: usize, h: usize, dst: &mut [T]) {
        let hd = self.head_dim();
        for t in 0..self.tokens {
            let off = (b * self.tokens + t) * self.dim + h * hd;
            for (d, s) in dst[off..off + hd].iter_mut().zip(&src[t * hd..(t + 1) * hd]) {
                *d += *s;
            }
        }
    }
}

impl<T: Scalar> Tape<T> {
    /// Scaled dot-product attention over `[B, T, D]` inputs split into
    /// `heads` heads of width `D / heads`, scale `1/sqrt(D / heads)`.
    pub fn attention(&mut self, query: Var, key: Var, value: Var, heads: usize) -> Result<Var> {
        self.check_all(&[query, key, value])?;
        let q = self.value(query);
        let (batch, tokens, dim) = match *q.shape() {
            [b, t, d] => (b, t, d),
            _ => {
                return Err(Error::shape(
                    "attention",
                    format!("expected [B, T, D], got {:?}", q.shape()),
                ))
            }
        };
        if self.value(key).shape() != q.shape() || self.value(value).shape() != q.shape() {
            return Err(Error::shape("attention", "query, key and value shapes differ"));
        }
        if heads == 0 || dim % heads != 0 {
            return Err(Error::shape(
                "attention",
                format!("model dim {dim} is not divisible by {heads} heads"),
            ));
        }
        let layout = HeadLayout {
            tokens,
            dim,
            heads,
        };
        let hd = layout.head_dim();
        let scale = T::one() / T::from_f64(hd as f64).sqrt();
        let (qd, kd, vd) = (q.data(), self.value(key).data(), self.value(value).data());

        let mut out = vec![T::zero(); q.numel()];
        let mut probs = vec![T::zero(); batch * heads * tokens * tokens];
        let mut qh = vec![T::zero(); tokens * hd];
        let mut kh = vec![T::zero(); tokens * hd];
        let mut vh = vec![T::zero(); tokens * hd];
        let mut oh = vec![T::zero(); tokens * hd];
        for b in 0..batch {
            for h in 0..heads {
                layout.gather(qd, b, h, &mut qh);
                layout.gather(kd, b, h, &mut kh);
                layout.gather(vd, b, h, &mut vh);
                let p = &mut probs[(b * heads + h) * tokens * tokens..][..tokens * tokens];
                gemm_nt(&qh, &kh, p, tokens, hd, tokens);
                for row in p.chunks_mut(tokens) {
                    row.iter_mut().for_each(|s| *s *= scale);
                    softmax_row(row);
                }
                oh.fill(T::zero());
                gemm_nn(p, &vh, &mut oh, tokens, tokens, hd);
                layout.scatter_add(&oh, b, h, &mut out);
            }
        }
        let value_t = Tensor::new(q.shape().to_vec(), out)?;
        self.push(
            "attention",
            value_t,
            &[query, key, value],
            Op::Attention(AttentionSaved {
                query,
                key,
                value,
                heads,
                probs,
            }),
        )
    }

    /// Self-attention: query, key and value all projected from `input`,
    /// heads concatenated and passed through the output projection.
    pub fn multi_head_attention(
        &mut self,
        input: Var,
        weights: &AttentionWeights,
        heads: usize,
    ) -> Result<Var> {
        let q = self.linear(input, weights.query.0, weights.query.1)?;
        let k = self.linear(input, weights.key.0, weights.key.1)?;
        let v = self.linear(input, weights.value.0, weights.value.1)?;
        let a = self.attention(q, k, v, heads)?;
        self.linear(a, weights.output.0, weights.output.1)
    }
}

impl<T: Scalar> AttentionSaved<T> {
    pub(crate) fn backward(&self, out: &Tensor<T>, gy: &[T], sink: &mut GradSink<'_, T>) {
        let [batch, tokens, dim] = *out.shape() else {
            unreachable!("validated in forward")
        };
        let layout = HeadLayout {
            tokens,
            dim,
            heads: self.heads,
        };
        let hd = layout.head_dim();
        let scale = T::one() / T::from_f64(hd as f64).sqrt();
        let qd = sink.value(self.query).data();
        let kd = sink.value(self.key).data();
        let vd = sink.value(self.value).data();
        let n = out.numel();
        let mut gq = vec![T::zero(); n];
        let mut gk = vec![T::zero(); n];
        let mut gv = vec![T::zero(); n];

        let mut qh = vec![T::zero(); tokens * hd];
        let mut kh = vec![T::zero(); tokens * hd];
        let mut vh = vec![T::zero(); tokens * hd];
        let mut goh = vec![T::zero(); tokens * hd];
        let mut buf = vec![T::zero(); tokens * hd];
        let mut dp = vec![T::zero(); tokens * tokens];
        for b in 0..batch {
            for h in 0..self.heads {
                let p = &self.probs[(b * self.heads + h) * tokens * tokens..][..tokens * tokens];
                layout.gather(qd, b, h, &mut qh);
                layout.gather(kd, b, h, &mut kh);
                layout.gather(vd, b, h, &mut vh);
                layout.gather(gy, b, h, &mut goh);

                // dV = Pᵀ dO
                buf.fill(T::zero());
                gemm_tn(p, &goh, &mut buf, tokens, tokens, hd);
                layout.scatter_add(&buf, b, h, &mut gv);

                // dP = dO Vᵀ, then through the row softmax and the scale.
                dp.fill(T::zero());
                gemm_nt(&goh, &vh, &mut dp, tokens, hd, tokens);
                for r in 0..tokens {
                    let row = r * tokens..(r + 1) * tokens;
                    let dotp: T = row.clone().map(|i| dp[i] * p[i]).sum();
                    for i in row {
                        dp[i] = p[i] * (dp[i] - dotp) * scale;
                    }
                }

                // dQ = dS K, dK = dSᵀ Q
                buf.fill(T::zero());
                gemm_nn(&dp, &kh, &mut buf, tokens, tokens, hd);
                layout.scatter_add(&buf, b, h, &mut gq);
                buf.fill(T::zero());
                gemm_tn(&dp, &qh, &mut buf, tokens, tokens, hd);
                layout.scatter_add(&buf, b, h, &mut gk);
            }
        }
        sink.add(self.query, &gq);
        sink.add(self.key, &gk);
        sink.add(self.value, &gv);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pseudo(shape: &[usize], seed: f64) -> Tensor<f64> {
        Tensor::from_fn(shape.to_vec(), |i| ((i as f64 + 1.0) * seed).sin() * 0.8)
    }

    fn weights(t: &mut Tape<f64>, d: usize, zero_bias: bool) -> AttentionWeights {
        let mut mk = |seed: f64| {
            let w = t.leaf(pseudo(&[d, d], seed));
            let b = t.leaf(if zero_bias {
                Tensor::zeros(vec![d])
            } else {
                pseudo(&[d], seed * 1.7)
            });
            (w, Some(b))
        };
        AttentionWeights {
            query: mk(0.31),
            key: mk(0.47),
            value: mk(0.59),
            output: mk(0.73),
        }
    }

    fn matvec(w: &[f64], b: &[f64], x: &[f64]) -> Vec<f64> {
        let d = x.len();
        (0..d)
            .map(|o| b[o] + (0..d).map(|i| w[o * d + i] * x[i]).sum::<f64>())
            .collect()
    }

    /// Per-head loops over explicit token pairs.
    fn naive_mha(t: &Tape<f64>, x: &Tensor<f64>, w: &AttentionWeights, heads: usize) -> Vec<f64> {
        let [b, tk, d] = *x.shape() else { panic!() };
        let hd = d / heads;
        let get = |p: (Var, Option<Var>)| {
            (
                t.value(p.0).data().to_vec(),
                t.value(p.1.unwrap()).data().to_vec(),
            )
        };
        let (wq, bq) = get(w.query);
        let (wk, bk) = get(w.key);
        let (wv, bv) = get(w.value);
        let (wo, bo) = get(w.output);
        let mut out = Vec::new();
        for bi in 0..b {
            let tok = |i: usize| x.data()[(bi * tk + i) * d..(bi * tk + i + 1) * d].to_vec();
            let q: Vec<Vec<f64>> = (0..tk).map(|i| matvec(&wq, &bq, &tok(i))).collect();
            let k: Vec<Vec<f64>> = (0..tk).map(|i| matvec(&wk, &bk, &tok(i))).collect();
            let v: Vec<Vec<f64>> = (0..tk).map(|i| matvec(&wv, &bv, &tok(i))).collect();
            for i in 0..tk {
                let mut concat = vec![0.0; d];
                for h in 0..heads {
                    let r = h * hd..(h + 1) * hd;
                    let scores: Vec<f64> = (0..tk)
                        .map(|j| {
                            r.clone().map(|c| q[i][c] * k[j][c]).sum::<f64>() / (hd as f64).sqrt()
                        })
                        .collect();
                    let m = scores.iter().cloned().fold(f64::MIN, f64::max);
                    let z: f64 = scores.iter().map(|s| (s - m).exp()).sum();
                    for j in 0..tk {
                        let a = (scores[j] - m).exp() / z;
                        for c in r.clone() {
                            concat[c] += a * v[j][c];
                        }
                    }
                }
                out.extend(matvec(&wo, &bo, &concat));
            }
        }
        out
    }

    #[test]
    fn matches_per_head_loop_oracle() {
        let mut t: Tape<f64> = Tape::new();
        let x = pseudo(&[1, 3, 4], 0.91);
        let w = weights(&mut t, 4, false);
        let xv = t.leaf(x.clone());
        let y = t.multi_head_attention(xv, &w, 2).unwrap();
        let want = naive_mha(&t, &x, &w, 2);
        for (a, b) in t.value(y).data().iter().zip(&want) {
            assert!((a - b).abs() < 1e-5);
        }
    }

    #[test]
    fn single_token_reduces_to_value_then_output_projection() {
        let mut t: Tape<f64> = Tape::new();
        let x = pseudo(&[2, 1, 4], 0.37);
        let w = weights(&mut t, 4, false);
        let xv = t.leaf(x.clone());
        let y = t.multi_head_attention(xv, &w, 2).unwrap();
        let v = t.linear(xv, w.value.0, w.value.1).unwrap();
        let direct = t.linear(v, w.output.0, w.output.1).unwrap();
        assert_eq!(t.value(y).data(), t.value(direct).data());
    }

    #[test]
    fn zero_input_zero_bias_gives_zero() {
        let mut t: Tape<f64> = Tape::new();
        let w = weights(&mut t, 8, true);
        let xv = t.leaf(Tensor::zeros(vec![2, 5, 8]));
        let y = t.multi_head_attention(xv, &w, 4).unwrap();
        assert!(t.value(y).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn indivisible_heads_rejected() {
        let mut t: Tape<f64> = Tape::new();
        let x = t.leaf(Tensor::zeros(vec![1, 2, 6]));
        assert!(matches!(t.attention(x, x, x, 4), Err(Error::Shape { .. })));
    }
}
