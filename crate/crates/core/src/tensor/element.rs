//! Scalar element abstraction: training runs in f32, gradient checks in f64.

use std::fmt::{Debug, Display};
use std::sync::Once;

const CBLAS_ROW_MAJOR: i32 = 101;
const CBLAS_NO_TRANS: i32 = 111;
const CBLAS_TRANS: i32 = 112;

extern "C" {
    fn cblas_sgemm(
        order: i32,
        transa: i32,
        transb: i32,
        m: i32,
        n: i32,
        k: i32,
        alpha: f32,
        a: *const f32,
        lda: i32,
        b: *const f32,
        ldb: i32,
        beta: f32,
        c: *mut f32,
        ldc: i32,
    );
    fn cblas_dgemm(
        order: i32,
        transa: i32,
        transb: i32,
        m: i32,
        n: i32,
        k: i32,
        alpha: f64,
        a: *const f64,
        lda: i32,
        b: *const f64,
        ldb: i32,
        beta: f64,
        c: *mut f64,
        ldc: i32,
    );
    fn openblas_set_num_threads(n: i32);
}

static BLAS_INIT: Once = Once::new();

/// Pin OpenBLAS to one thread. Parallelism lives at the sample/sequence
/// level, and a fixed thread count keeps reductions byte-reproducible.
fn blas_single_thread() {
    BLAS_INIT.call_once(|| unsafe { openblas_set_num_threads(1) });
}

/// Floating-point element type usable in tensors and the autodiff graph.
pub trait Element:
    num_traits::Float + num_traits::NumAssign + Copy + Send + Sync + Debug + Display + 'static
{
    fn from_f64(v: f64) -> Self;
    fn as_f64(self) -> f64;

    /// Row-major GEMM: `c = alpha * op(a) * op(b) + beta * c`.
    ///
    /// `a` is m×k after `trans_a`, `b` is k×n after `trans_b`, `c` is m×n.
    /// Leading dimensions are the row strides of the *stored* matrices.
    #[allow(clippy::too_many_arguments)]
    fn gemm(
        trans_a: bool,
        trans_b: bool,
        m: usize,
        n: usize,
        k: usize,
        alpha: Self,
        a: &[Self],
        lda: usize,
        b: &[Self],
        ldb: usize,
        beta: Self,
        c: &mut [Self],
        ldc: usize,
    );
}

fn trans_flag(t: bool) -> i32 {
    if t {
        CBLAS_TRANS
    } else {
        CBLAS_NO_TRANS
    }
}

impl Element for f32 {
    fn from_f64(v: f64) -> Self {
        v as f32
    }
    fn as_f64(self) -> f64 {
        self as f64
    }

    fn gemm(
        trans_a: bool,
        trans_b: bool,
        m: usize,
        n: usize,
        k: usize,
        alpha: Self,
        a: &[Self],
        lda: usize,
        b: &[Self],
        ldb: usize,
        beta: Self,
        c: &mut [Self],
        ldc: usize,
    ) {
        blas_single_thread();
        debug_assert!(c.len() >= (m.saturating_sub(1)) * ldc + n);
        unsafe {
            cblas_sgemm(
                CBLAS_ROW_MAJOR,
                trans_flag(trans_a),
                trans_flag(trans_b),
                m as i32,
                n as i32,
                k as i32,
                alpha,
                a.as_ptr(),
                lda as i32,
                b.as_ptr(),
                ldb as i32,
                beta,
                c.as_mut_ptr(),
                ldc as i32,
            );
        }
    }
}

impl Element for f64 {
    fn from_f64(v: f64) -> Self {
        v
    }
    fn as_f64(self) -> f64 {
        self
    }

    fn gemm(
        trans_a: bool,
        trans_b: bool,
        m: usize,
        n: usize,
        k: usize,
        alpha: Self,
        a: &[Self],
        lda: usize,
        b: &[Self],
        ldb: usize,
        beta: Self,
        c: &mut [Self],
        ldc: usize,
    ) {
        blas_single_thread();
        debug_assert!(c.len() >= (m.saturating_sub(1)) * ldc + n);
        unsafe {
            cblas_dgemm(
                CBLAS_ROW_MAJOR,
                trans_flag(trans_a),
                trans_flag(trans_b),
                m as i32,
                n as i32,
                k as i32,
                alpha,
                a.as_ptr(),
                lda as i32,
                b.as_ptr(),
                ldb as i32,
                beta,
                c.as_mut_ptr(),
                ldc as i32,
            );
        }
    }
}
