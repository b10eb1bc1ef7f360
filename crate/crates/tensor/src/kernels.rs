//! Matrix product kernel and small element-wise helpers shared by the ops.

use crate::real::Real;

/// Whether an operand is read as stored or transposed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Transpose {
    No,
    Yes,
}

/// `c = op(a) * op(b) + beta * c` for row-major buffers.
///
/// `op(a)` is `m x k` and `op(b)` is `k x n`. When an operand is transposed
/// its storage holds the untransposed matrix (`k x m` for `a`).
///
/// Panics when a buffer is shorter than its declared dimensions.
#[allow(clippy::too_many_arguments)]
pub fn gemm<T: Real>(
    ta: Transpose,
    tb: Transpose,
    m: usize,
    k: usize,
    n: usize,
    a: &[T],
    b: &[T],
    beta: T,
    c: &mut [T],
) {
    assert!(a.len() >= m * k, "gemm: lhs buffer too short");
    assert!(b.len() >= k * n, "gemm: rhs buffer too short");
    assert!(c.len() >= m * n, "gemm: output buffer too short");
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        for v in &mut c[..m * n] {
            *v *= beta;
        }
        return;
    }
    let (rsa, csa) = match ta {
        Transpose::No => (k as isize, 1),
        Transpose::Yes => (1, m as isize),
    };
    let (rsb, csb) = match tb {
        Transpose::No => (n as isize, 1),
        Transpose::Yes => (1, k as isize),
    };
    // SAFETY: lengths checked above; strides address exactly m*k, k*n and m*n
    // elements of distinct slices.
    unsafe {
        T::gemm_raw(
            m,
            k,
            n,
            T::one(),
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

pub(crate) fn add_into<T: Real>(dst: &mut [T], src: &[T]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}
