//! Scalar element types supported by [`Tensor`](crate::Tensor).
//!
//! Training runs in `f32`; gradient checking runs in `f64`, where central
//! differences are accurate enough to resolve a 1e-4 relative error.

use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

use num_traits::{Float, FromPrimitive, ToPrimitive};

/// On-disk / in-memory dtype tag.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum DType {
    F32,
    F64,
}

impl DType {
    pub fn tag(self) -> u8 {
        match self {
            DType::F32 => 1,
            DType::F64 => 2,
        }
    }

    pub fn from_tag(tag: u8) -> Option<Self> {
        match tag {
            1 => Some(DType::F32),
            2 => Some(DType::F64),
            _ => None,
        }
    }

    pub fn size_bytes(self) -> usize {
        match self {
            DType::F32 => 4,
            DType::F64 => 8,
        }
    }
}

impl Display for DType {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            DType::F32 => f.write_str("f32"),
            DType::F64 => f.write_str("f64"),
        }
    }
}

/// Row/column strides of a matrix operand, in elements.
#[derive(Debug, Clone, Copy)]
pub struct Layout {
    pub row_stride: usize,
    pub col_stride: usize,
}

impl Layout {
    /// Contiguous row-major matrix with `cols` columns.
    pub const fn row_major(cols: usize) -> Self {
        Layout {
            row_stride: cols,
            col_stride: 1,
        }
    }

    /// Transposed view of a row-major matrix that has `cols` columns in memory.
    pub const fn transposed(cols: usize) -> Self {
        Layout {
            row_stride: 1,
            col_stride: cols,
        }
    }

    fn span(self, rows: usize, cols: usize) -> usize {
        if rows == 0 || cols == 0 {
            0
        } else {
            (rows - 1) * self.row_stride + (cols - 1) * self.col_stride + 1
        }
    }
}

pub trait Element:
    Float
    + FromPrimitive
    + ToPrimitive
    + Default
    + Debug
    + Display
    + Send
    + Sync
    + Sum
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + 'static
{
    const DTYPE: DType;

    /// `c = alpha * a(m×k) · b(k×n) + beta * c(m×n)`.
    ///
    /// Panics if any operand slice is too short for its layout.
    #[allow(clippy::too_many_arguments)]
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: &[Self],
        a_layout: Layout,
        b: &[Self],
        b_layout: Layout,
        beta: Self,
        c: &mut [Self],
        c_layout: Layout,
    );

    /// In-place `exp` over a slice. The f32 version uses a polynomial that
    /// vectorizes; its relative error stays below 2 ulp.
    fn exp_slice(xs: &mut [Self]);

    fn write_le(self, out: &mut Vec<u8>);

    /// Reads one value from exactly `DTYPE.size_bytes()` bytes.
    fn read_le(bytes: &[u8]) -> Self;

    fn from_f64_lossy(v: f64) -> Self {
        Self::from_f64(v).expect("finite f64 converts to every element type")
    }

    fn to_f64_lossy(self) -> f64 {
        self.to_f64().unwrap_or(f64::NAN)
    }
}

fn check_gemm_operands<T>(
    m: usize,
    k: usize,
    n: usize,
    a: &[T],
    a_layout: Layout,
    b: &[T],
    b_layout: Layout,
    c: &[T],
    c_layout: Layout,
) {
    assert!(a.len() >= a_layout.span(m, k), "gemm: lhs operand too short");
    assert!(b.len() >= b_layout.span(k, n), "gemm: rhs operand too short");
    assert!(c.len() >= c_layout.span(m, n), "gemm: output operand too short");
    // Output rows/cols must not alias each other.
    assert!(
        m <= 1 || n <= 1 || c_layout.row_stride >= n * c_layout.col_stride || c_layout.col_stride >= m * c_layout.row_stride,
        "gemm: overlapping output layout"
    );
}

fn exp_slice_std<T: Float>(xs: &mut [T]) {
    for x in xs {
        *x = x.exp();
    }
}

// Range reduction x = n·ln2 + r with |r| ≤ ln2/2, then a degree-7 polynomial
// for e^r (Cephes coefficients) and an exponent-field scale by 2^n.
fn exp_slice_f32(xs: &mut [f32]) {
    const LOG2E: f32 = std::f32::consts::LOG2_E;
    const LN2_HI: f32 = 0.693_359_4;
    const LN2_LO: f32 = -2.121_944_4e-4;
    const ROUND: f32 = 12_582_912.0; // 1.5 · 2^23
    const P: [f32; 6] = [
        1.987_569_1e-4,
        1.398_199_9e-3,
        8.333_452e-3,
        4.166_579_6e-2,
        1.666_666_5e-1,
        5.000_000_1e-1,
    ];
    for x in xs {
        let v = *x;
        let c = v.clamp(-87.0, 88.0);
        let n = (c * LOG2E + ROUND) - ROUND;
        let r = c - n * LN2_HI - n * LN2_LO;
        let mut p = P[0];
        for &k in &P[1..] {
            p = p * r + k;
        }
        let y = p * r * r + r + 1.0;
        let scale = f32::from_bits(((n as i32 + 127) as u32) << 23);
        *x = if v < -87.0 {
            0.0
        } else if v > 88.0 {
            f32::INFINITY
        } else {
            y * scale
        };
    }
}

macro_rules! impl_element {
    ($ty:ty, $dtype:expr, $gemm:path, $exp:path) => {
        impl Element for $ty {
            const DTYPE: DType = $dtype;

            fn gemm(
                m: usize,
                k: usize,
                n: usize,
                alpha: Self,
                a: &[Self],
                a_layout: Layout,
                b: &[Self],
                b_layout: Layout,
                beta: Self,
                c: &mut [Self],
                c_layout: Layout,
            ) {
                if m == 0 || n == 0 {
                    return;
                }
                check_gemm_operands(m, k, n, a, a_layout, b, b_layout, c, c_layout);
                // SAFETY: every operand was checked above to cover the full
                // strided extent the kernel will touch, and `c` is uniquely
                // borrowed with a non-overlapping layout.
                unsafe {
                    $gemm(
                        m,
                        k,
                        n,
                        alpha,
                        a.as_ptr(),
                        a_layout.row_stride as isize,
                        a_layout.col_stride as isize,
                        b.as_ptr(),
                        b_layout.row_stride as isize,
                        b_layout.col_stride as isize,
                        beta,
                        c.as_mut_ptr(),
                        c_layout.row_stride as isize,
                        c_layout.col_stride as isize,
                    );
                }
            }

            fn exp_slice(xs: &mut [Self]) {
                $exp(xs)
            }

            fn write_le(self, out: &mut Vec<u8>) {
                out.extend_from_slice(&self.to_le_bytes());
            }

            fn read_le(bytes: &[u8]) -> Self {
                <$ty>::from_le_bytes(bytes.try_into().expect("element byte width"))
            }
        }
    };
}

impl_element!(f32, DType::F32, matrixmultiply::sgemm, exp_slice_f32);
impl_element!(f64, DType::F64, matrixmultiply::dgemm, exp_slice_std);
