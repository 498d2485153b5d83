//! Raw numeric kernels over row-major slices. No shape bookkeeping here;
//! callers in `tape` validate dimensions first.

use super::Scalar;

/// Strided view of a matrix inside a slice.
#[derive(Clone, Copy, Debug)]
pub struct View {
    pub offset: usize,
    pub rs: isize,
    pub cs: isize,
}

impl View {
    /// Contiguous row-major `rows×cols` matrix.
    pub fn row_major(cols: usize) -> Self {
        View { offset: 0, rs: cols as isize, cs: 1 }
    }

    /// Row-major storage of shape `cols×rows` read as its transpose.
    pub fn transposed(stored_cols: usize) -> Self {
        View { offset: 0, rs: 1, cs: stored_cols as isize }
    }

    pub fn at(offset: usize, rs: usize) -> Self {
        View { offset, rs: rs as isize, cs: 1 }
    }

    pub fn t(self) -> Self {
        View { offset: self.offset, rs: self.cs, cs: self.rs }
    }
}

/// `c[view] = alpha * a·b + beta * c[view]` for an `m×k` by `k×n` product.
#[allow(clippy::too_many_arguments)]
pub fn gemm<T: Scalar>(
    m: usize,
    k: usize,
    n: usize,
    alpha: T,
    a: &[T],
    av: View,
    b: &[T],
    bv: View,
    beta: T,
    c: &mut [T],
    cv: View,
) {
    if m == 0 || n == 0 {
        return;
    }
    debug_assert!(in_bounds(a.len(), av, m, k));
    debug_assert!(in_bounds(b.len(), bv, k, n));
    debug_assert!(in_bounds(c.len(), cv, m, n));
    // SAFETY: the three views were checked (in debug) to stay inside their
    // slices, and `c` is uniquely borrowed.
    unsafe {
        T::gemm(
            m,
            k,
            n,
            alpha,
            a.as_ptr().add(av.offset),
            av.rs,
            av.cs,
            b.as_ptr().add(bv.offset),
            bv.rs,
            bv.cs,
            beta,
            c.as_mut_ptr().add(cv.offset),
            cv.rs,
            cv.cs,
        );
    }
}

fn in_bounds(len: usize, v: View, rows: usize, cols: usize) -> bool {
    if rows == 0 || cols == 0 {
        return true;
    }
    let last = v.offset as isize + (rows as isize - 1) * v.rs + (cols as isize - 1) * v.cs;
    v.rs >= 0 && v.cs >= 0 && (last as usize) < len
}

/// Row-major `a (m×k) · b (k×n)`.
pub fn matmul<T: Scalar>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut out = vec![T::zero(); m * n];
    gemm(m, k, n, T::one(), a, View::row_major(k), b, View::row_major(n), T::zero(), &mut out, View::row_major(n));
    out
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

/// Tanh approximation of GELU.
#[inline]
pub fn gelu<T: Scalar>(x: T) -> T {
    let c = T::from_f64_lossy(GELU_C);
    let a = T::from_f64_lossy(GELU_A);
    let half = T::from_f64_lossy(0.5);
    half * x * (T::one() + tanh(c * (x + a * x * x * x)))
}

/// `tanh` through a single `exp`; libm's `tanh` is several times slower and
/// dominates the MLP otherwise. Saturates cleanly to ±1.
#[inline]
fn tanh<T: Scalar>(u: T) -> T {
    let two = T::one() + T::one();
    T::one() - two / ((two * u).exp() + T::one())
}

#[inline]
pub fn gelu_grad<T: Scalar>(x: T) -> T {
    let c = T::from_f64_lossy(GELU_C);
    let a = T::from_f64_lossy(GELU_A);
    let half = T::from_f64_lossy(0.5);
    let three = T::from_f64_lossy(3.0);
    let u = c * (x + a * x * x * x);
    let th = tanh(u);
    let du = c * (T::one() + three * a * x * x);
    half * (T::one() + th) + half * x * (T::one() - th * th) * du
}

/// In-place softmax of one row restricted to `allowed` positions.
/// Disallowed entries become exactly zero. Returns `false` when no entry is
/// allowed.
pub fn masked_softmax_row<T: Scalar>(row: &mut [T], allowed: &[bool]) -> bool {
    let mut max = T::neg_infinity();
    for (x, &ok) in row.iter().zip(allowed) {
        if ok && *x > max {
            max = *x;
        }
    }
    if max == T::neg_infinity() {
        if !allowed.iter().any(|&a| a) {
            return false;
        }
        max = T::zero();
    }
    let mut sum = T::zero();
    for (x, &ok) in row.iter_mut().zip(allowed) {
        if ok {
            *x = (*x - max).exp();
            sum = sum + *x;
        } else {
            *x = T::zero();
        }
    }
    let inv = T::one() / sum;
    for x in row.iter_mut() {
        *x = *x * inv;
    }
    true
}

/// Backward of a softmax row: `dx = y ⊙ (g − Σ g⊙y)`.
pub fn softmax_row_backward<T: Scalar>(y: &[T], g: &[T], dx: &mut [T]) {
    let dot: T = y.iter().zip(g).map(|(&a, &b)| a * b).sum();
    for ((d, &yi), &gi) in dx.iter_mut().zip(y).zip(g) {
        *d = *d + yi * (gi - dot);
    }
}

pub fn add_assign<T: Scalar>(dst: &mut [T], src: &[T]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d = *d + s;
    }
}
