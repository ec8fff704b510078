//! Flat row-major matrices and the handful of dense kernels the models need.
//!
//! Everything is generic over [`Scalar`] so the same forward/backward code can
//! run in `f32` for training and in `f64` for finite-difference gradient
//! checks. Reductions that feed probabilities or losses always accumulate in
//! `f64`: an `f32` running sum over a vocabulary-sized row loses more accuracy
//! than the tolerances downstream code promises.

use num_traits::Float;

/// Element type for model math: `f32` in production, `f64` for gradient checks.
///
/// The only backend-specific piece is `gemm_raw`, which dispatches to the
/// matching `matrixmultiply` kernel.
pub trait Scalar:
    Float + num_traits::NumAssign + Copy + Send + Sync + std::fmt::Debug + std::fmt::Display + 'static
{
    const NAME: &'static str;

    fn from_f64(x: f64) -> Self;
    fn as_f64(self) -> f64;

    /// `C := alpha * op(A) * op(B) + beta * C` over raw row/column strides.
    ///
    /// # Safety
    /// Pointers must cover `m`/`k`/`n` elements under the given strides, and
    /// `c` must not alias `a` or `b`.
    #[allow(clippy::too_many_arguments)]
    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    );
}

impl Scalar for f32 {
    const NAME: &'static str = "f32";

    fn from_f64(x: f64) -> Self {
        x as f32
    }

    fn as_f64(self) -> f64 {
        self as f64
    }

    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::sgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
    }
}

impl Scalar for f64 {
    const NAME: &'static str = "f64";

    fn from_f64(x: f64) -> Self {
        x
    }

    fn as_f64(self) -> f64 {
        self
    }

    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::dgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
    }
}

/// Dense row-major matrix backed by a flat `Vec`.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix<S = f32> {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<S>,
}

impl<S: Scalar> Matrix<S> {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![S::zero(); rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<S>) -> Self {
        assert_eq!(data.len(), rows * cols, "matrix data length {} != {rows}x{cols}", data.len());
        Matrix { rows, cols, data }
    }

    /// Build from an existing matrix's shape, filled with zeros.
    pub fn zeros_like(other: &Matrix<S>) -> Self {
        Matrix::zeros(other.rows, other.cols)
    }

    pub fn row(&self, i: usize) -> &[S] {
        debug_assert!(i < self.rows);
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [S] {
        debug_assert!(i < self.rows);
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn get(&self, i: usize, j: usize) -> S {
        debug_assert!(i < self.rows && j < self.cols);
        self.data[i * self.cols + j]
    }

    pub fn set(&mut self, i: usize, j: usize, v: S) {
        debug_assert!(i < self.rows && j < self.cols);
        self.data[i * self.cols + j] = v;
    }

    pub fn fill(&mut self, v: S) {
        self.data.fill(v);
    }

    /// Element count.
    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// `self += other`, shapes must match.
    pub fn add_assign(&mut self, other: &Matrix<S>) {
        assert_eq!((self.rows, self.cols), (other.rows, other.cols));
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += *b;
        }
    }

    /// `self *= s`.
    pub fn scale(&mut self, s: S) {
        for a in &mut self.data {
            *a *= s;
        }
    }
}

/// `C := alpha * op(A) * op(B) + beta * C` where `op` optionally transposes.
///
/// Transposes are expressed through strides, so no data is copied.
pub fn gemm<S: Scalar>(
    alpha: S,
    a: &Matrix<S>,
    trans_a: bool,
    b: &Matrix<S>,
    trans_b: bool,
    beta: S,
    c: &mut Matrix<S>,
) {
    let (m, k) = if trans_a { (a.cols, a.rows) } else { (a.rows, a.cols) };
    let (k2, n) = if trans_b { (b.cols, b.rows) } else { (b.rows, b.cols) };
    assert_eq!(k, k2, "gemm inner dimensions differ: {k} vs {k2}");
    assert_eq!(
        (c.rows, c.cols),
        (m, n),
        "gemm output is {}x{}, expected {m}x{n}",
        c.rows,
        c.cols
    );
    let (rsa, csa) = if trans_a {
        (1, a.cols as isize)
    } else {
        (a.cols as isize, 1)
    };
    let (rsb, csb) = if trans_b {
        (1, b.cols as isize)
    } else {
        (b.cols as isize, 1)
    };
    unsafe {
        S::gemm_raw(
            m,
            k,
            n,
            alpha,
            a.data.as_ptr(),
            rsa,
            csa,
            b.data.as_ptr(),
            rsb,
            csb,
            beta,
            c.data.as_mut_ptr(),
            c.cols as isize,
            1,
        );
    }
}

/// `A * B` into a freshly allocated matrix.
pub fn matmul<S: Scalar>(a: &Matrix<S>, b: &Matrix<S>) -> Matrix<S> {
    let mut c = Matrix::zeros(a.rows, b.cols);
    gemm(S::one(), a, false, b, false, S::zero(), &mut c);
    c
}

// ---------------------------------------------------------------------------
// Softmax family
// ---------------------------------------------------------------------------

/// Max-shifted softmax over one row, normalizer accumulated in `f64`.
///
/// With `f32` storage the written probabilities still sum to 1 within a few
/// ulps: each element carries at most its own rounding error, and those are
/// weighted by the probabilities themselves.
pub fn softmax_in_place<S: Scalar>(row: &mut [S]) {
    let mut max = f64::NEG_INFINITY;
    for x in row.iter() {
        max = max.max(x.as_f64());
    }
    let mut sum = 0.0f64;
    for x in row.iter_mut() {
        let e = (x.as_f64() - max).exp();
        sum += e;
        *x = S::from_f64(e);
    }
    let inv = 1.0 / sum;
    for x in row.iter_mut() {
        *x = S::from_f64(x.as_f64() * inv);
    }
}

/// Softmax over every row of a matrix.
pub fn softmax_rows<S: Scalar>(m: &mut Matrix<S>) {
    for i in 0..m.rows {
        softmax_in_place(m.row_mut(i));
    }
}

/// `log(sum(exp(row)))` computed in `f64` with max shifting.
pub fn logsumexp<S: Scalar>(row: &[S]) -> f64 {
    let mut max = f64::NEG_INFINITY;
    for x in row {
        max = max.max(x.as_f64());
    }
    if max == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    let mut sum = 0.0f64;
    for x in row {
        sum += (x.as_f64() - max).exp();
    }
    max + sum.ln()
}

/// Index of the largest element; the first one wins ties.
pub fn argmax<S: Scalar>(xs: &[S]) -> usize {
    assert!(!xs.is_empty(), "argmax of an empty slice");
    let mut best = 0;
    for (i, x) in xs.iter().enumerate().skip(1) {
        if *x > xs[best] {
            best = i;
        }
    }
    best
}

// ---------------------------------------------------------------------------
// Activations
//
// Evaluated in f64 internally so the f32 and f64 instantiations of a model
// agree to f32 rounding, which keeps gradient checks meaningful.
// ---------------------------------------------------------------------------

const SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;
const GELU_CUBIC: f64 = 0.044_715;

/// GELU with the tanh approximation.
pub fn gelu<S: Scalar>(x: S) -> S {
    let x = x.as_f64();
    let u = SQRT_2_OVER_PI * (x + GELU_CUBIC * x * x * x);
    S::from_f64(0.5 * x * (1.0 + u.tanh()))
}

/// Derivative of [`gelu`] with respect to its input.
pub fn gelu_grad<S: Scalar>(x: S) -> S {
    let x = x.as_f64();
    let u = SQRT_2_OVER_PI * (x + GELU_CUBIC * x * x * x);
    let t = u.tanh();
    let du = SQRT_2_OVER_PI * (1.0 + 3.0 * GELU_CUBIC * x * x);
    S::from_f64(0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du)
}

/// SiLU (swish): `x * sigmoid(x)`.
pub fn silu<S: Scalar>(x: S) -> S {
    let x = x.as_f64();
    let s = 1.0 / (1.0 + (-x).exp());
    S::from_f64(x * s)
}

/// Derivative of [`silu`] with respect to its input.
pub fn silu_grad<S: Scalar>(x: S) -> S {
    let x = x.as_f64();
    let s = 1.0 / (1.0 + (-x).exp());
    S::from_f64(s * (1.0 + x * (1.0 - s)))
}
