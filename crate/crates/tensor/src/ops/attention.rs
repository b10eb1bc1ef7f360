//! Fused multi-head scaled dot-product attention over packed sequences.
//!
//! Several independent sequences are stored back to back as rows of one
//! matrix. A [`AttentionSegments`] list says which query rows attend to which
//! key rows, so a whole batch runs through one op without padding.

use crate::error::{Result, TensorError};
use crate::graph::{BackwardOp, Contributions, Graph, GraphView, Var};
use crate::kernels::{gemm, Transpose};
use crate::ops::nn::{softmax_row, softmax_row_backward};
use crate::real::Real;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct Span {
    q_start: usize,
    q_len: usize,
    k_start: usize,
    k_len: usize,
}

/// Query/key row ranges for each packed sequence.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct AttentionSegments {
    spans: Vec<Span>,
}

impl AttentionSegments {
    pub fn new() -> Self {
        Self::default()
    }

    /// Self-attention segments from consecutive sequence lengths.
    pub fn from_lengths(lengths: &[usize]) -> Self {
        Self::cross(lengths, lengths)
    }

    /// Cross-attention segments: query sequence `i` attends to key sequence `i`.
    pub fn cross(q_lengths: &[usize], k_lengths: &[usize]) -> Self {
        assert_eq!(q_lengths.len(), k_lengths.len(), "segment count mismatch");
        let mut segs = Self::new();
        let (mut qs, mut ks) = (0, 0);
        for (&ql, &kl) in q_lengths.iter().zip(k_lengths) {
            segs.push(qs, ql, ks, kl);
            qs += ql;
            ks += kl;
        }
        segs
    }

    pub fn push(&mut self, q_start: usize, q_len: usize, k_start: usize, k_len: usize) {
        self.spans.push(Span {
            q_start,
            q_len,
            k_start,
            k_len,
        });
    }

    pub fn len(&self) -> usize {
        self.spans.len()
    }

    pub fn is_empty(&self) -> bool {
        self.spans.is_empty()
    }

    fn validate(&self, q_rows: usize, k_rows: usize, causal: bool) -> Result<()> {
        for s in &self.spans {
            if s.q_len == 0 || s.k_len == 0 {
                return Err(TensorError::Contract("attention segment must be non-empty".into()));
            }
            if s.q_start + s.q_len > q_rows {
                return Err(TensorError::IndexOutOfRange {
                    op: "attention",
                    index: s.q_start + s.q_len,
                    bound: q_rows,
                });
            }
            if s.k_start + s.k_len > k_rows {
                return Err(TensorError::IndexOutOfRange {
                    op: "attention",
                    index: s.k_start + s.k_len,
                    bound: k_rows,
                });
            }
            if causal && s.q_len != s.k_len {
                return Err(TensorError::Contract(
                    "causal attention needs equal query and key lengths".into(),
                ));
            }
        }
        Ok(())
    }
}

fn copy_head<T: Real>(src: &[T], start: usize, len: usize, width: usize, head: usize, dh: usize) -> Vec<T> {
    let mut out = Vec::with_capacity(len * dh);
    for r in start..start + len {
        let base = r * width + head * dh;
        out.extend_from_slice(&src[base..base + dh]);
    }
    out
}

fn add_head<T: Real>(dst: &mut [T], block: &[T], start: usize, len: usize, width: usize, head: usize, dh: usize) {
    for (i, r) in (start..start + len).enumerate() {
        let base = r * width + head * dh;
        for (d, &x) in dst[base..base + dh].iter_mut().zip(&block[i * dh..(i + 1) * dh]) {
            *d += x;
        }
    }
}

/// Attention probabilities for every `(segment, head)` pair, each a row-major
/// `q_len x k_len` block. Masked (future) positions are exactly zero.
pub fn attention_probs<T: Real>(
    q: &Tensor<T>,
    k: &Tensor<T>,
    segs: &AttentionSegments,
    heads: usize,
    causal: bool,
) -> Result<Vec<Vec<T>>> {
    let d = q.cols();
    if k.cols() != d || heads == 0 || d % heads != 0 {
        return Err(TensorError::shape("attention", q.shape(), k.shape()));
    }
    segs.validate(q.rows(), k.rows(), causal)?;
    let dh = d / heads;
    let scale = T::one() / T::from_usize(dh).expect("head width fits").sqrt();
    let mut all = Vec::with_capacity(segs.len() * heads);
    for s in &segs.spans {
        for h in 0..heads {
            let qh = copy_head(q.data(), s.q_start, s.q_len, d, h, dh);
            let kh = copy_head(k.data(), s.k_start, s.k_len, d, h, dh);
            let mut scores = vec![T::zero(); s.q_len * s.k_len];
            gemm(Transpose::No, Transpose::Yes, s.q_len, dh, s.k_len, &qh, &kh, T::zero(), &mut scores);
            let mut probs = vec![T::zero(); scores.len()];
            for i in 0..s.q_len {
                let row = &mut scores[i * s.k_len..(i + 1) * s.k_len];
                for x in row.iter_mut() {
                    *x *= scale;
                }
                let visible = if causal { i + 1 } else { s.k_len };
                softmax_row(&row[..visible], &mut probs[i * s.k_len..i * s.k_len + visible]);
            }
            all.push(probs);
        }
    }
    Ok(all)
}

struct AttentionOp<T> {
    q: Var,
    k: Var,
    v: Var,
    segs: AttentionSegments,
    heads: usize,
    probs: Vec<Vec<T>>,
}

impl<T: Real> BackwardOp<T> for AttentionOp<T> {
    fn backward(&self, _out: &Tensor<T>, g: &[T], view: &GraphView<'_, T>) -> Contributions<T> {
        let (qt, kt, vt) = (view.value(self.q), view.value(self.k), view.value(self.v));
        let d = qt.cols();
        let dh = d / self.heads;
        let scale = T::one() / T::from_usize(dh).expect("head width fits").sqrt();
        let mut gq = vec![T::zero(); qt.numel()];
        let mut gk = vec![T::zero(); kt.numel()];
        let mut gv = vec![T::zero(); vt.numel()];
        let mut probs = self.probs.iter();
        for s in &self.segs.spans {
            let (ql, kl) = (s.q_len, s.k_len);
            for h in 0..self.heads {
                let p = probs.next().expect("one block per segment and head");
                let qh = copy_head(qt.data(), s.q_start, ql, d, h, dh);
                let kh = copy_head(kt.data(), s.k_start, kl, d, h, dh);
                let vh = copy_head(vt.data(), s.k_start, kl, d, h, dh);
                let go = copy_head(g, s.q_start, ql, d, h, dh);

                // dV = P^T dO
                let mut dv = vec![T::zero(); kl * dh];
                gemm(Transpose::Yes, Transpose::No, kl, ql, dh, p, &go, T::zero(), &mut dv);
                add_head(&mut gv, &dv, s.k_start, kl, d, h, dh);

                // dP = dO V^T, then through the softmax
                let mut dp = vec![T::zero(); ql * kl];
                gemm(Transpose::No, Transpose::Yes, ql, dh, kl, &go, &vh, T::zero(), &mut dp);
                let mut ds = vec![T::zero(); ql * kl];
                for i in 0..ql {
                    let r = i * kl..(i + 1) * kl;
                    softmax_row_backward(&p[r.clone()], &dp[r.clone()], &mut ds[r]);
                }
                for x in ds.iter_mut() {
                    *x *= scale;
                }

                let mut dq = vec![T::zero(); ql * dh];
                gemm(Transpose::No, Transpose::No, ql, kl, dh, &ds, &kh, T::zero(), &mut dq);
                add_head(&mut gq, &dq, s.q_start, ql, d, h, dh);

                let mut dk = vec![T::zero(); kl * dh];
                gemm(Transpose::Yes, Transpose::No, kl, ql, dh, &ds, &qh, T::zero(), &mut dk);
                add_head(&mut gk, &dk, s.k_start, kl, d, h, dh);
            }
        }
        vec![(self.q, gq), (self.k, gk), (self.v, gv)]
    }
}

impl<T: Real> Graph<T> {
    /// Multi-head attention `softmax(Q K^T / sqrt(d_h)) V` per segment.
    ///
    /// `q: [Rq, D]`, `k, v: [Rk, D]`; output is `[Rq, D]`. Query rows not
    /// covered by any segment produce zeros. With `causal`, query `i` of a
    /// segment only sees keys `0..=i` of that segment.
    pub fn attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        segs: &AttentionSegments,
        heads: usize,
        causal: bool,
    ) -> Result<Var> {
        self.check_var(q)?;
        self.check_var(k)?;
        self.check_var(v)?;
        if self.shape(k) != self.shape(v) || self.value(q).rank() != 2 || self.value(k).rank() != 2 {
            return Err(TensorError::shape("attention", self.shape(k), self.shape(v)));
        }
        let probs = attention_probs(self.value(q), self.value(k), segs, heads, causal)?;
        let d = self.value(q).cols();
        let dh = d / heads;
        let vt = self.value(v);
        let mut out = vec![T::zero(); self.value(q).numel()];
        let mut blocks = probs.iter();
        for s in &segs.spans {
            for h in 0..heads {
                let p = blocks.next().expect("one block per segment and head");
                let vh = copy_head(vt.data(), s.k_start, s.k_len, d, h, dh);
                let mut o = vec![T::zero(); s.q_len * dh];
                gemm(Transpose::No, Transpose::No, s.q_len, s.k_len, dh, p, &vh, T::zero(), &mut o);
                add_head(&mut out, &o, s.q_start, s.q_len, d, h, dh);
            }
        }
        let out = Tensor::new(self.shape(q).to_vec(), out)?;
        let keep = if self.grad_enabled() { probs } else { Vec::new() };
        Ok(self.push_op(
            out,
            &[q, k, v],
            AttentionOp {
                q,
                k,
                v,
                segs: segs.clone(),
                heads,
                probs: keep,
            },
        ))
    }
}
