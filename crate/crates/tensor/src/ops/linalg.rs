use crate::error::{Result, TensorError};
use crate::graph::{BackwardOp, Contributions, Graph, GraphView, Var};
use crate::kernels::{gemm, Transpose};
use crate::real::Real;
use crate::tensor::Tensor;

struct MatMulOp {
    a: Var,
    b: Var,
    m: usize,
    k: usize,
    n: usize,
}

impl<T: Real> BackwardOp<T> for MatMulOp {
    fn backward(&self, _out: &Tensor<T>, g: &[T], v: &GraphView<'_, T>) -> Contributions<T> {
        let (m, k, n) = (self.m, self.k, self.n);
        let mut out = Vec::with_capacity(2);
        if v.tracked(self.a) {
            // dA = G * B^T
            let mut ga = vec![T::zero(); m * k];
            gemm(Transpose::No, Transpose::Yes, m, n, k, g, v.value(self.b).data(), T::zero(), &mut ga);
            out.push((self.a, ga));
        }
        if v.tracked(self.b) {
            // dB = A^T * G
            let mut gb = vec![T::zero(); k * n];
            gemm(Transpose::Yes, Transpose::No, k, m, n, v.value(self.a).data(), g, T::zero(), &mut gb);
            out.push((self.b, gb));
        }
        out
    }
}

impl<T: Real> Graph<T> {
    /// Matrix product of `[m, k]` and `[k, n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_var(a)?;
        self.check_var(b)?;
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(TensorError::shape("matmul", sa, sb));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut data = vec![T::zero(); m * n];
        gemm(
            Transpose::No,
            Transpose::No,
            m,
            k,
            n,
            self.value(a).data(),
            self.value(b).data(),
            T::zero(),
            &mut data,
        );
        let out = Tensor::new(vec![m, n], data)?;
        Ok(self.push_op(out, &[a, b], MatMulOp { a, b, m, k, n }))
    }

    /// `x * w + bias` with `x: [m, k]`, `w: [k, n]`, `bias: [n]`.
    pub fn linear(&mut self, x: Var, w: Var, bias: Option<Var>) -> Result<Var> {
        let y = self.matmul(x, w)?;
        match bias {
            Some(b) => self.add_broadcast(y, b),
            None => Ok(y),
        }
    }
}
