use crate::error::{Result, TensorError};
use crate::graph::{BackwardOp, Contributions, Graph, GraphView, Var};
use crate::real::Real;
use crate::tensor::Tensor;

/// Row-wise stabilized softmax written into `out`.
pub(crate) fn softmax_row<T: Real>(x: &[T], out: &mut [T]) {
    let max = x.iter().copied().fold(T::neg_infinity(), T::max);
    let mut sum = T::zero();
    for (o, &v) in out.iter_mut().zip(x) {
        let e = (v - max).exp();
        *o = e;
        sum += e;
    }
    let inv = T::one() / sum;
    for o in out.iter_mut() {
        *o *= inv;
    }
}

/// `dx = y * (g - <g, y>)` for one softmax row.
pub(crate) fn softmax_row_backward<T: Real>(y: &[T], g: &[T], dx: &mut [T]) {
    let dot: T = y.iter().zip(g).map(|(&a, &b)| a * b).sum();
    for ((d, &yv), &gv) in dx.iter_mut().zip(y).zip(g) {
        *d = yv * (gv - dot);
    }
}

/// `logsumexp(x) - x[target]`, accurate when the target dominates the row.
fn nll_row<T: Real>(x: &[T], target: usize) -> T {
    let (arg, max) = x
        .iter()
        .copied()
        .enumerate()
        .fold((0, T::neg_infinity()), |acc, (i, v)| if v > acc.1 { (i, v) } else { acc });
    let rest: T = x
        .iter()
        .enumerate()
        .filter(|&(i, _)| i != arg)
        .map(|(_, &v)| (v - max).exp())
        .sum();
    (max - x[target]) + rest.ln_1p()
}

struct SoftmaxOp {
    a: Var,
}

impl<T: Real> BackwardOp<T> for SoftmaxOp {
    fn backward(&self, out: &Tensor<T>, g: &[T], _v: &GraphView<'_, T>) -> Contributions<T> {
        let n = out.cols();
        let mut ga = vec![T::zero(); g.len()];
        for ((y, gr), d) in out
            .data()
            .chunks_exact(n)
            .zip(g.chunks_exact(n))
            .zip(ga.chunks_exact_mut(n))
        {
            softmax_row_backward(y, gr, d);
        }
        vec![(self.a, ga)]
    }
}

struct LayerNormOp<T> {
    x: Var,
    gamma: Var,
    beta: Var,
    xhat: Vec<T>,
    rstd: Vec<T>,
}

impl<T: Real> BackwardOp<T> for LayerNormOp<T> {
    fn backward(&self, _out: &Tensor<T>, g: &[T], v: &GraphView<'_, T>) -> Contributions<T> {
        let gamma = v.value(self.gamma).data();
        let d = gamma.len();
        let inv_d = T::one() / T::from_usize(d).expect("width fits");
        let mut gx = vec![T::zero(); g.len()];
        let mut ggamma = vec![T::zero(); d];
        let mut gbeta = vec![T::zero(); d];
        let mut gxhat = vec![T::zero(); d];
        for (r, ((gr, xh), dx)) in g
            .chunks_exact(d)
            .zip(self.xhat.chunks_exact(d))
            .zip(gx.chunks_exact_mut(d))
            .enumerate()
        {
            let mut mean_g = T::zero();
            let mut mean_gx = T::zero();
            for j in 0..d {
                ggamma[j] += gr[j] * xh[j];
                gbeta[j] += gr[j];
                gxhat[j] = gr[j] * gamma[j];
                mean_g += gxhat[j];
                mean_gx += gxhat[j] * xh[j];
            }
            mean_g *= inv_d;
            mean_gx *= inv_d;
            let rs = self.rstd[r];
            for j in 0..d {
                dx[j] = rs * (gxhat[j] - mean_g - xh[j] * mean_gx);
            }
        }
        vec![(self.x, gx), (self.gamma, ggamma), (self.beta, gbeta)]
    }
}

struct CrossEntropyOp<T> {
    logits: Var,
    probs: Vec<T>,
    targets: Vec<Option<usize>>,
    count: usize,
}

impl<T: Real> BackwardOp<T> for CrossEntropyOp<T> {
    fn backward(&self, _out: &Tensor<T>, g: &[T], v: &GraphView<'_, T>) -> Contributions<T> {
        let vocab = v.value(self.logits).cols();
        let mut gl = vec![T::zero(); self.probs.len()];
        if self.count > 0 {
            let scale = g[0] / T::from_usize(self.count).expect("count fits");
            for (row, t) in self.targets.iter().enumerate() {
                let Some(t) = *t else { continue };
                let base = row * vocab;
                for j in 0..vocab {
                    gl[base + j] = self.probs[base + j] * scale;
                }
                gl[base + t] -= scale;
            }
        }
        vec![(self.logits, gl)]
    }
}

impl<T: Real> Graph<T> {
    /// Softmax over the last axis, stabilized by max subtraction.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        self.check_var(a)?;
        let t = self.value(a);
        let n = t.cols();
        let mut data = vec![T::zero(); t.numel()];
        for (x, o) in t.data().chunks_exact(n).zip(data.chunks_exact_mut(n)) {
            softmax_row(x, o);
        }
        let out = Tensor::new(t.shape().to_vec(), data)?;
        Ok(self.push_op(out, &[a], SoftmaxOp { a }))
    }

    /// Normalizes each row over the last axis, then applies `gamma` and `beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: T) -> Result<Var> {
        self.check_var(x)?;
        self.check_var(gamma)?;
        self.check_var(beta)?;
        let d = self.value(x).cols();
        if self.shape(gamma) != [d] || self.shape(beta) != [d] {
            return Err(TensorError::shape("layer_norm", self.shape(x), self.shape(gamma)));
        }
        if eps <= T::zero() {
            return Err(TensorError::Contract("layer_norm eps must be positive".into()));
        }
        let t = self.value(x);
        let gv = self.value(gamma).data();
        let bv = self.value(beta).data();
        let inv_d = T::one() / T::from_usize(d).expect("width fits");
        let rows = t.rows();
        let mut xhat = vec![T::zero(); t.numel()];
        let mut rstd = Vec::with_capacity(rows);
        let mut data = vec![T::zero(); t.numel()];
        for ((xr, xh), yr) in t
            .data()
            .chunks_exact(d)
            .zip(xhat.chunks_exact_mut(d))
            .zip(data.chunks_exact_mut(d))
        {
            let mean = xr.iter().copied().sum::<T>() * inv_d;
            let var = xr.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv_d;
            let rs = T::one() / (var + eps).sqrt();
            for j in 0..d {
                xh[j] = (xr[j] - mean) * rs;
                yr[j] = xh[j] * gv[j] + bv[j];
            }
            rstd.push(rs);
        }
        let out = Tensor::new(t.shape().to_vec(), data)?;
        Ok(self.push_op(
            out,
            &[x, gamma, beta],
            LayerNormOp {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
        ))
    }

    /// Mean negative log-likelihood of `targets` under row-wise softmax of
    /// `logits: [L, V]`. Positions whose target equals `pad_id` are skipped;
    /// when every position is padding the loss is 0 with zero gradient.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize], pad_id: usize) -> Result<Var> {
        self.check_var(logits)?;
        let t = self.value(logits);
        if t.rank() != 2 || t.shape()[0] != targets.len() {
            return Err(TensorError::shape("cross_entropy", t.shape(), &[targets.len()]));
        }
        let vocab = t.cols();
        let mut probs = vec![T::zero(); t.numel()];
        let mut tgt = Vec::with_capacity(targets.len());
        let mut total = T::zero();
        let mut count = 0usize;
        for (row, &target) in targets.iter().enumerate() {
            if target == pad_id {
                tgt.push(None);
                continue;
            }
            if target >= vocab {
                return Err(TensorError::IndexOutOfRange {
                    op: "cross_entropy",
                    index: target,
                    bound: vocab,
                });
            }
            let x = t.row(row);
            let p = &mut probs[row * vocab..(row + 1) * vocab];
            softmax_row(x, p);
            total += nll_row(x, target);
            count += 1;
            tgt.push(Some(target));
        }
        let loss = if count == 0 {
            T::zero()
        } else {
            total / T::from_usize(count).expect("count fits")
        };
        Ok(self.push_op(
            Tensor::scalar(loss),
            &[logits],
            CrossEntropyOp {
                logits,
                probs,
                targets: tgt,
                count,
            },
        ))
    }
}
