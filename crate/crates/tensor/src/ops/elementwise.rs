use crate::error::{Result, TensorError};
use crate::graph::{BackwardOp, Contributions, Graph, GraphView, Var};
use crate::real::Real;
use crate::tensor::Tensor;

struct AddOp {
    a: Var,
    b: Var,
}

impl<T: Real> BackwardOp<T> for AddOp {
    fn backward(&self, _out: &Tensor<T>, g: &[T], _v: &GraphView<'_, T>) -> Contributions<T> {
        vec![(self.a, g.to_vec()), (self.b, g.to_vec())]
    }
}

struct SubOp {
    a: Var,
    b: Var,
}

impl<T: Real> BackwardOp<T> for SubOp {
    fn backward(&self, _out: &Tensor<T>, g: &[T], _v: &GraphView<'_, T>) -> Contributions<T> {
        vec![(self.a, g.to_vec()), (self.b, g.iter().map(|&x| -x).collect())]
    }
}

struct MulOp {
    a: Var,
    b: Var,
}

impl<T: Real> BackwardOp<T> for MulOp {
    fn backward(&self, _out: &Tensor<T>, g: &[T], v: &GraphView<'_, T>) -> Contributions<T> {
        let av = v.value(self.a).data();
        let bv = v.value(self.b).data();
        let ga = g.iter().zip(bv).map(|(&g, &b)| g * b).collect();
        let gb = g.iter().zip(av).map(|(&g, &a)| g * a).collect();
        vec![(self.a, ga), (self.b, gb)]
    }
}

struct ScaleOp<T> {
    a: Var,
    s: T,
}

impl<T: Real> BackwardOp<T> for ScaleOp<T> {
    fn backward(&self, _out: &Tensor<T>, g: &[T], _v: &GraphView<'_, T>) -> Contributions<T> {
        vec![(self.a, g.iter().map(|&x| x * self.s).collect())]
    }
}

/// `b` is tiled over the leading axes of `a`.
struct AddBroadcastOp {
    a: Var,
    b: Var,
    block: usize,
}

impl<T: Real> BackwardOp<T> for AddBroadcastOp {
    fn backward(&self, _out: &Tensor<T>, g: &[T], v: &GraphView<'_, T>) -> Contributions<T> {
        let mut out = vec![(self.a, g.to_vec())];
        if v.tracked(self.b) {
            let mut gb = vec![T::zero(); self.block];
            for chunk in g.chunks_exact(self.block) {
                for (acc, &x) in gb.iter_mut().zip(chunk) {
                    *acc += x;
                }
            }
            out.push((self.b, gb));
        }
        out
    }
}

struct MulConstOp<T> {
    a: Var,
    mask: Vec<T>,
}

impl<T: Real> BackwardOp<T> for MulConstOp<T> {
    fn backward(&self, _out: &Tensor<T>, g: &[T], _v: &GraphView<'_, T>) -> Contributions<T> {
        vec![(self.a, g.iter().zip(&self.mask).map(|(&g, &m)| g * m).collect())]
    }
}

struct ReluOp {
    a: Var,
}

impl<T: Real> BackwardOp<T> for ReluOp {
    fn backward(&self, out: &Tensor<T>, g: &[T], _v: &GraphView<'_, T>) -> Contributions<T> {
        let ga = g
            .iter()
            .zip(out.data())
            .map(|(&g, &y)| if y > T::zero() { g } else { T::zero() })
            .collect();
        vec![(self.a, ga)]
    }
}

struct GeluOp {
    a: Var,
}

fn gelu_consts<T: Real>() -> (T, T, T) {
    // sqrt(2/pi), cubic coefficient, one half
    (
        T::from_f64_lossy((2.0 / std::f64::consts::PI).sqrt()),
        T::from_f64_lossy(0.044715),
        T::from_f64_lossy(0.5),
    )
}

impl<T: Real> BackwardOp<T> for GeluOp {
    fn backward(&self, _out: &Tensor<T>, g: &[T], v: &GraphView<'_, T>) -> Contributions<T> {
        let (c, k, half) = gelu_consts::<T>();
        let three = T::from_f64_lossy(3.0);
        let ga = g
            .iter()
            .zip(v.value(self.a).data())
            .map(|(&g, &x)| {
                let u = c * (x + k * x * x * x);
                let t = u.tanh();
                let du = c * (T::one() + three * k * x * x);
                let d = half * (T::one() + t) + half * x * (T::one() - t * t) * du;
                g * d
            })
            .collect();
        vec![(self.a, ga)]
    }
}

struct SumOp {
    a: Var,
    n: usize,
}

impl<T: Real> BackwardOp<T> for SumOp {
    fn backward(&self, _out: &Tensor<T>, g: &[T], _v: &GraphView<'_, T>) -> Contributions<T> {
        vec![(self.a, vec![g[0]; self.n])]
    }
}

impl<T: Real> Graph<T> {
    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        self.check_var(a)?;
        self.check_var(b)?;
        if self.shape(a) != self.shape(b) {
            return Err(TensorError::shape(op, self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    fn zip_map(&self, a: Var, b: Var, f: impl Fn(T, T) -> T) -> Tensor<T> {
        let av = self.value(a);
        let data = av
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        Tensor::new(av.shape().to_vec(), data).expect("same shape")
    }

    fn map(&self, a: Var, f: impl Fn(T) -> T) -> Tensor<T> {
        let av = self.value(a);
        let data = av.data().iter().map(|&x| f(x)).collect();
        Tensor::new(av.shape().to_vec(), data).expect("same shape")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let out = self.zip_map(a, b, |x, y| x + y);
        Ok(self.push_op(out, &[a, b], AddOp { a, b }))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let out = self.zip_map(a, b, |x, y| x - y);
        Ok(self.push_op(out, &[a, b], SubOp { a, b }))
    }

    /// Element-wise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let out = self.zip_map(a, b, |x, y| x * y);
        Ok(self.push_op(out, &[a, b], MulOp { a, b }))
    }

    pub fn scale(&mut self, a: Var, s: T) -> Result<Var> {
        self.check_var(a)?;
        let out = self.map(a, |x| x * s);
        Ok(self.push_op(out, &[a], ScaleOp { a, s }))
    }

    /// `a + b` where `b`'s shape equals the trailing axes of `a`'s shape,
    /// e.g. a row bias `[n]` on `[m, n]` or a `[N, D]` table on `[B, N, D]`
    /// stored as `[B*N, D]` rows.
    pub fn add_broadcast(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_var(a)?;
        self.check_var(b)?;
        let (sa, sb) = (self.shape(a), self.shape(b));
        let block = self.value(b).numel();
        let suffix_ok = sb.len() <= sa.len() && sa[sa.len() - sb.len()..] == *sb;
        let rows_ok = sb.len() == sa.len()
            && sa[1..] == sb[1..]
            && self.value(a).numel() % block == 0;
        if !(suffix_ok || rows_ok) {
            return Err(TensorError::shape("add_broadcast", sa, sb));
        }
        let bv = self.value(b).data();
        let av = self.value(a);
        let mut data = av.data().to_vec();
        for chunk in data.chunks_exact_mut(block) {
            for (x, &y) in chunk.iter_mut().zip(bv) {
                *x += y;
            }
        }
        let out = Tensor::new(av.shape().to_vec(), data)?;
        Ok(self.push_op(out, &[a, b], AddBroadcastOp { a, b, block }))
    }

    /// Multiplies by a constant mask of the same length (dropout, stochastic
    /// depth).
    pub fn mul_const(&mut self, a: Var, mask: Vec<T>) -> Result<Var> {
        self.check_var(a)?;
        if mask.len() != self.value(a).numel() {
            return Err(TensorError::shape("mul_const", self.shape(a), &[mask.len()]));
        }
        let av = self.value(a);
        let data = av.data().iter().zip(&mask).map(|(&x, &m)| x * m).collect();
        let out = Tensor::new(av.shape().to_vec(), data)?;
        Ok(self.push_op(out, &[a], MulConstOp { a, mask }))
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.check_var(a)?;
        let out = self.map(a, |x| if x > T::zero() { x } else { T::zero() });
        Ok(self.push_op(out, &[a], ReluOp { a }))
    }

    /// Tanh approximation of GELU.
    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        self.check_var(a)?;
        let (c, k, half) = gelu_consts::<T>();
        let out = self.map(a, |x| half * x * (T::one() + (c * (x + k * x * x * x)).tanh()));
        Ok(self.push_op(out, &[a], GeluOp { a }))
    }

    pub fn sum_all(&mut self, a: Var) -> Result<Var> {
        self.check_var(a)?;
        let av = self.value(a);
        let n = av.numel();
        let s = av.data().iter().copied().sum();
        Ok(self.push_op(Tensor::scalar(s), &[a], SumOp { a, n }))
    }

    pub fn mean_all(&mut self, a: Var) -> Result<Var> {
        let s = self.sum_all(a)?;
        let n = self.value(a).numel();
        self.scale(s, T::one() / T::from_usize(n).expect("count fits"))
    }
}
