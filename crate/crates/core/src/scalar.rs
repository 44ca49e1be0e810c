//! Scalar abstraction shared by the numerical core.
//!
//! Everything in [`crate::nn`] and [`crate::dt`] is written against [`Scalar`]
//! so the same model code can run in `f32` (the runtime precision) and in
//! `f64` (used by finite-difference oracles in tests).

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, NumAssign, ToPrimitive};

pub trait Scalar:
    Float
    + FromPrimitive
    + ToPrimitive
    + NumAssign
    + Sum
    + Default
    + Debug
    + Display
    + Send
    + Sync
    + 'static
{
    /// `c = alpha * a·b + beta * c` on strided row/column views.
    ///
    /// # Safety
    /// Every index reachable through the given dimensions and strides must lie
    /// inside the corresponding buffer. Use [`gemm`] for a checked entry point.
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

    /// In-place hyperbolic tangent.
    fn tanh_slice(xs: &mut [Self]) {
        for x in xs {
            *x = x.tanh();
        }
    }

    fn from_f64_lossy(x: f64) -> Self {
        Self::from_f64(x).expect("finite f64 converts to any float scalar")
    }

    fn from_usize_lossy(x: usize) -> Self {
        Self::from_usize(x).expect("usize converts to any float scalar")
    }

    fn as_f64(self) -> f64 {
        self.to_f64().unwrap_or(f64::NAN)
    }

    fn as_f32(self) -> f32 {
        self.to_f32().unwrap_or(f32::NAN)
    }
}

impl Scalar for f32 {
    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: f32,
        a: *const f32,
        rsa: isize,
        csa: isize,
        b: *const f32,
        rsb: isize,
        csb: isize,
        beta: f32,
        c: *mut f32,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::sgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc);
    }

    fn tanh_slice(xs: &mut [f32]) {
        for x in xs {
            *x = tanh_f32(*x);
        }
    }
}

/// Branch-free rational tanh, within 5e-7 of the exact value.
/// Written so the loop in `tanh_slice` vectorises.
#[inline]
pub fn tanh_f32(x: f32) -> f32 {
    // Beyond this the rational form saturates to ±1 in f32.
    const CLAMP: f32 = 7.905_311;
    let xc = x.clamp(-CLAMP, CLAMP);
    let x2 = xc * xc;
    let mut p = -2.760_768_5e-16f32;
    p = p * x2 + 2.000_188e-13;
    p = p * x2 - 8.604_672e-11;
    p = p * x2 + 5.122_297e-8;
    p = p * x2 + 1.485_722_4e-5;
    p = p * x2 + 6.372_619_4e-4;
    p = p * x2 + 4.893_524_6e-3;
    p *= xc;
    let mut q = 1.198_258_4e-6f32;
    q = q * x2 + 1.185_347e-4;
    q = q * x2 + 2.268_434_6e-3;
    q = q * x2 + 4.893_525e-3;
    let r = (p / q).clamp(-1.0, 1.0);
    if x.abs() < 4e-4 {
        x
    } else {
        r
    }
}

impl Scalar for f64 {
    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: f64,
        a: *const f64,
        rsa: isize,
        csa: isize,
        b: *const f64,
        rsb: isize,
        csb: isize,
        beta: f64,
        c: *mut f64,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::dgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc);
    }
}

/// Read-only strided matrix view.
#[derive(Clone, Copy)]
pub struct MatRef<'a, S> {
    pub data: &'a [S],
    pub rows: usize,
    pub cols: usize,
    pub rs: usize,
    pub cs: usize,
}

/// Mutable strided matrix view.
pub struct MatMut<'a, S> {
    pub data: &'a mut [S],
    pub rows: usize,
    pub cols: usize,
    pub rs: usize,
    pub cs: usize,
}

impl<'a, S> MatRef<'a, S> {
    /// Row-major `rows × cols` view starting at `offset` with row stride `ld`.
    pub fn row_major(data: &'a [S], offset: usize, rows: usize, cols: usize, ld: usize) -> Self {
        MatRef { data: &data[offset..], rows, cols, rs: ld, cs: 1 }
    }

    /// Transposed view of a row-major `rows × cols` block: shape `cols × rows`.
    pub fn transposed(data: &'a [S], offset: usize, rows: usize, cols: usize, ld: usize) -> Self {
        MatRef { data: &data[offset..], rows: cols, cols: rows, rs: 1, cs: ld }
    }

    fn max_index(&self) -> usize {
        if self.rows == 0 || self.cols == 0 {
            0
        } else {
            (self.rows - 1) * self.rs + (self.cols - 1) * self.cs + 1
        }
    }
}

impl<'a, S> MatMut<'a, S> {
    pub fn row_major(data: &'a mut [S], offset: usize, rows: usize, cols: usize, ld: usize) -> Self {
        MatMut { data: &mut data[offset..], rows, cols, rs: ld, cs: 1 }
    }

    pub fn transposed(data: &'a mut [S], offset: usize, rows: usize, cols: usize, ld: usize) -> Self {
        MatMut { data: &mut data[offset..], rows: cols, cols: rows, rs: 1, cs: ld }
    }

    fn max_index(&self) -> usize {
        if self.rows == 0 || self.cols == 0 {
            0
        } else {
            (self.rows - 1) * self.rs + (self.cols - 1) * self.cs + 1
        }
    }
}

/// Bounds-checked `c = alpha * a·b + beta * c`.
pub fn gemm<S: Scalar>(alpha: S, a: MatRef<'_, S>, b: MatRef<'_, S>, beta: S, c: MatMut<'_, S>) {
    assert_eq!(a.cols, b.rows, "gemm inner dimension");
    assert_eq!(a.rows, c.rows, "gemm row dimension");
    assert_eq!(b.cols, c.cols, "gemm column dimension");
    assert!(a.max_index() <= a.data.len(), "gemm lhs out of bounds");
    assert!(b.max_index() <= b.data.len(), "gemm rhs out of bounds");
    assert!(c.max_index() <= c.data.len(), "gemm output out of bounds");
    if c.rows == 0 || c.cols == 0 {
        return;
    }
    // SAFETY: all reachable indices were checked against the slice lengths above.
    unsafe {
        S::gemm_raw(
            a.rows,
            a.cols,
            b.cols,
            alpha,
            a.data.as_ptr(),
            a.rs as isize,
            a.cs as isize,
            b.data.as_ptr(),
            b.rs as isize,
            b.cs as isize,
            beta,
            c.data.as_mut_ptr(),
            c.rs as isize,
            c.cs as isize,
        );
    }
}
