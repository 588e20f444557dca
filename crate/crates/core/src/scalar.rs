//! Scalar abstraction shared by every numeric module.

use std::fmt::{Debug, Display, LowerExp};
use std::iter::Sum;

use num_traits::{Float, FloatConst, FromPrimitive, NumAssign, ToPrimitive};

/// Floating-point scalar used throughout the crate: `f64` by default, `f32` permitted.
pub trait Real:
    Float
    + FloatConst
    + FromPrimitive
    + ToPrimitive
    + NumAssign
    + Default
    + Debug
    + Display
    + LowerExp
    + Sum
    + Send
    + Sync
    + 'static
{
    /// Name written into checkpoints and configs.
    const NAME: &'static str;
    /// Width of one value in the little-endian checkpoint layout.
    const BYTES: usize;
    /// Multiplier applied to numerical tolerances calibrated for `f64`.
    const TOLERANCE_SCALE: f64;

    /// Converts an `f64` literal. Never fails for finite input.
    fn lit(x: f64) -> Self {
        Self::from_f64(x).expect("f64 literal representable")
    }

    fn as_f64(self) -> f64 {
        self.to_f64().expect("finite scalar")
    }

    fn write_le(self, out: &mut Vec<u8>);

    /// Reads one value from exactly `Self::BYTES` bytes.
    fn read_le(bytes: &[u8]) -> Self;

    /// Raw `gemm` kernel; use [`gemm`] instead.
    #[doc(hidden)]
    fn gemm_kernel(g: Gemm, a: &[Self], b: &[Self], c: &mut [Self]);
}

/// Dimensions and strides of `C[m,n] = A[m,k] · B[k,n]`, with `C`
/// contiguous row-major. Strides let transposed operands be read in place.
#[derive(Clone, Copy, Debug)]
pub struct Gemm {
    pub m: usize,
    pub k: usize,
    pub n: usize,
    /// Row and column stride of `A`.
    pub a: (usize, usize),
    /// Row and column stride of `B`.
    pub b: (usize, usize),
}

impl Gemm {
    fn span(rows: usize, cols: usize, (rs, cs): (usize, usize)) -> usize {
        if rows == 0 || cols == 0 {
            0
        } else {
            (rows - 1) * rs + (cols - 1) * cs + 1
        }
    }
}

/// Overwrites `c` with `A · B`.
pub fn gemm<T: Real>(g: Gemm, a: &[T], b: &[T], c: &mut [T]) {
    assert!(a.len() >= Gemm::span(g.m, g.k, g.a), "gemm: A too short");
    assert!(b.len() >= Gemm::span(g.k, g.n, g.b), "gemm: B too short");
    assert_eq!(c.len(), g.m * g.n, "gemm: C has the wrong size");
    if g.m == 0 || g.n == 0 {
        return;
    }
    if g.k == 0 {
        c.fill(T::zero());
        return;
    }
    T::gemm_kernel(g, a, b, c);
}

macro_rules! gemm_impl {
    ($f:ident) => {
        fn gemm_kernel(g: Gemm, a: &[Self], b: &[Self], c: &mut [Self]) {
            let s = |x: usize| x as isize;
            // SAFETY: `gemm` checked that every strided access stays inside
            // `a`, `b` and `c`, and `c` is exclusively borrowed.
            unsafe {
                matrixmultiply::$f(
                    g.m, g.k, g.n, 1.0,
                    a.as_ptr(), s(g.a.0), s(g.a.1),
                    b.as_ptr(), s(g.b.0), s(g.b.1),
                    0.0, c.as_mut_ptr(), s(g.n), 1,
                );
            }
        }
    };
}

impl Real for f64 {
    const NAME: &'static str = "f64";
    const BYTES: usize = 8;
    const TOLERANCE_SCALE: f64 = 1.0;

    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }

    fn read_le(bytes: &[u8]) -> Self {
        f64::from_le_bytes(bytes.try_into().expect("8 bytes"))
    }

    gemm_impl!(dgemm);
}

impl Real for f32 {
    const NAME: &'static str = "f32";
    const BYTES: usize = 4;
    const TOLERANCE_SCALE: f64 = 100.0;

    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }

    fn read_le(bytes: &[u8]) -> Self {
        f32::from_le_bytes(bytes.try_into().expect("4 bytes"))
    }

    gemm_impl!(sgemm);
}
