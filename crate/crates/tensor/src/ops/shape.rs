use crate::error::{Result, TensorError};
use crate::graph::{BackwardOp, Contributions, Graph, GraphView, Var};
use crate::real::Real;
use crate::tensor::Tensor;

struct ReshapeOp {
    a: Var,
}

impl<T: Real> BackwardOp<T> for ReshapeOp {
    fn backward(&self, _out: &Tensor<T>, g: &[T], _v: &GraphView<'_, T>) -> Contributions<T> {
        vec![(self.a, g.to_vec())]
    }
}

struct TransposeOp {
    a: Var,
    rows: usize,
    cols: usize,
}

fn transpose_buf<T: Real>(src: &[T], rows: usize, cols: usize) -> Vec<T> {
    let mut out = vec![T::zero(); src.len()];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = src[r * cols + c];
        }
    }
    out
}

impl<T: Real> BackwardOp<T> for TransposeOp {
    fn backward(&self, _out: &Tensor<T>, g: &[T], _v: &GraphView<'_, T>) -> Contributions<T> {
        // g is cols x rows
        vec![(self.a, transpose_buf(g, self.cols, self.rows))]
    }
}

struct ConcatOp {
    parts: Vec<(Var, usize)>,
}

impl<T: Real> BackwardOp<T> for ConcatOp {
    fn backward(&self, _out: &Tensor<T>, g: &[T], v: &GraphView<'_, T>) -> Contributions<T> {
        let mut offset = 0;
        let mut out = Vec::new();
        for &(var, len) in &self.parts {
            if v.tracked(var) {
                out.push((var, g[offset..offset + len].to_vec()));
            }
            offset += len;
        }
        out
    }
}

struct SliceOp {
    a: Var,
    offset: usize,
    total: usize,
}

impl<T: Real> BackwardOp<T> for SliceOp {
    fn backward(&self, _out: &Tensor<T>, g: &[T], _v: &GraphView<'_, T>) -> Contributions<T> {
        let mut ga = vec![T::zero(); self.total];
        ga[self.offset..self.offset + g.len()].copy_from_slice(g);
        vec![(self.a, ga)]
    }
}

struct GatherOp {
    a: Var,
    idx: Vec<usize>,
    width: usize,
    total: usize,
}

impl<T: Real> BackwardOp<T> for GatherOp {
    fn backward(&self, _out: &Tensor<T>, g: &[T], _v: &GraphView<'_, T>) -> Contributions<T> {
        let w = self.width;
        let mut ga = vec![T::zero(); self.total];
        for (row, &src) in self.idx.iter().enumerate() {
            let dst = &mut ga[src * w..(src + 1) * w];
            for (d, &x) in dst.iter_mut().zip(&g[row * w..(row + 1) * w]) {
                *d += x;
            }
        }
        vec![(self.a, ga)]
    }
}

impl<T: Real> Graph<T> {
    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        self.check_var(a)?;
        let out = self.value(a).clone().reshape(shape)?;
        let mut out = out;
        out.set_requires_grad(false);
        out.clear_grad();
        Ok(self.push_op(out, &[a], ReshapeOp { a }))
    }

    /// Transpose of a rank-2 tensor.
    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        self.check_var(a)?;
        let s = self.shape(a);
        if s.len() != 2 {
            return Err(TensorError::Contract(format!(
                "transpose expects a matrix, got shape {s:?}"
            )));
        }
        let (rows, cols) = (s[0], s[1]);
        let data = transpose_buf(self.value(a).data(), rows, cols);
        let out = Tensor::new(vec![cols, rows], data)?;
        Ok(self.push_op(out, &[a], TransposeOp { a, rows, cols }))
    }

    /// Concatenates along the first axis; trailing axes must agree.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| TensorError::Contract("concat_rows of zero tensors".into()))?;
        self.check_var(first)?;
        let tail = self.shape(first)[1..].to_vec();
        let mut lead = 0;
        let mut data = Vec::new();
        let mut meta = Vec::with_capacity(parts.len());
        for &p in parts {
            self.check_var(p)?;
            let s = self.shape(p);
            if s[1..] != tail[..] {
                return Err(TensorError::shape("concat_rows", self.shape(first), s));
            }
            lead += s[0];
            let t = self.value(p);
            data.extend_from_slice(t.data());
            meta.push((p, t.numel()));
        }
        let mut shape = vec![lead];
        shape.extend_from_slice(&tail);
        let out = Tensor::new(shape, data)?;
        Ok(self.push_op(out, parts, ConcatOp { parts: meta }))
    }

    /// Rows `[start, start + len)` along the first axis.
    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        self.check_var(a)?;
        let s = self.shape(a).to_vec();
        if len == 0 || start + len > s[0] {
            return Err(TensorError::IndexOutOfRange {
                op: "slice_rows",
                index: start + len,
                bound: s[0],
            });
        }
        let inner: usize = s[1..].iter().product();
        let t = self.value(a);
        let data = t.data()[start * inner..(start + len) * inner].to_vec();
        let mut shape = s.clone();
        shape[0] = len;
        let total = t.numel();
        let out = Tensor::new(shape, data)?;
        Ok(self.push_op(
            out,
            &[a],
            SliceOp {
                a,
                offset: start * inner,
                total,
            },
        ))
    }

    /// Selects rows of a matrix by index (embedding lookup). Repeated indices
    /// accumulate gradient.
    pub fn gather_rows(&mut self, a: Var, idx: &[usize]) -> Result<Var> {
        self.check_var(a)?;
        let s = self.shape(a);
        if s.len() != 2 {
            return Err(TensorError::Contract(format!(
                "gather_rows expects a matrix, got shape {s:?}"
            )));
        }
        if idx.is_empty() {
            return Err(TensorError::Contract("gather_rows with no indices".into()));
        }
        let (rows, width) = (s[0], s[1]);
        if let Some(&bad) = idx.iter().find(|&&i| i >= rows) {
            return Err(TensorError::IndexOutOfRange {
                op: "gather_rows",
                index: bad,
                bound: rows,
            });
        }
        let t = self.value(a);
        let mut data = Vec::with_capacity(idx.len() * width);
        for &i in idx {
            data.extend_from_slice(t.row(i));
        }
        let total = t.numel();
        let out = Tensor::new(vec![idx.len(), width], data)?;
        Ok(self.push_op(
            out,
            &[a],
            GatherOp {
                a,
                idx: idx.to_vec(),
                width,
                total,
            },
        ))
    }
}
