use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, MulAssign, SubAssign};

use num_traits::Float;

/// Element type of a [`Tensor`](super::Tensor).
///
/// `f64` is used for gradient checks and oracles, `f32` for training runs.
pub trait Scalar:
    Float
    + Default
    + Debug
    + Display
    + Send
    + Sync
    + Sum
    + AddAssign
    + SubAssign
    + MulAssign
    + 'static
{
    /// `c = alpha * a * b + beta * c` with arbitrary row/column strides.
    ///
    /// # Safety
    /// Pointers and strides must describe valid, non-overlapping (for `c`)
    /// matrices of the given extents.
    #[allow(clippy::too_many_arguments)]
    unsafe fn gemm(
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

    fn erf(self) -> Self;

    /// Elementwise [`gelu_and_slope`](Scalar::gelu_and_slope) into `v`, `s`.
    fn gelu_slice(x: &[Self], v: &mut [Self], s: &mut [Self]) {
        for ((x, v), s) in x.iter().zip(v).zip(s) {
            (*v, *s) = x.gelu_and_slope();
        }
    }

    /// `(GELU(x), GELU'(x))` with `GELU(x) = x·Φ(x)`.
    fn gelu_and_slope(self) -> (Self, Self) {
        let half = Self::of(0.5);
        let cdf = half * (Self::one() + (self * Self::of(std::f64::consts::FRAC_1_SQRT_2)).erf());
        let pdf = Self::of(INV_SQRT_2PI) * (-half * self * self).exp();
        (self * cdf, cdf + self * pdf)
    }

    fn of(x: f64) -> Self;

    fn as_f64(self) -> f64;
}

const INV_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

/// `erfc(x)·exp(x²)` for `x ≥ 0`, Abramowitz–Stegun 7.1.26.
#[inline(always)]
fn erfc_poly(x: f32) -> f32 {
    let t = 1.0 / (1.0 + 0.327_591_1 * x);
    t * (0.254_829_6 + t * (-0.284_496_74 + t * (1.421_413_8 + t * (-1.453_152 + t * 1.061_405_4))))
}

/// `exp(−y)` for `y ≥ 0`, relative error ~2e-7. Branch-free with no
/// float-to-int casts, so loops over it vectorize.
#[inline(always)]
fn exp_neg(y: f32) -> f32 {
    const MAGIC: f32 = 12_582_912.0;
    let z = -y * std::f32::consts::LOG2_E;
    let z = if z < -126.0 { -126.0 } else { z };
    // Round to nearest: the integer lands in the low mantissa bits of `k`.
    let k = z + MAGIC;
    let f = z - (k - MAGIC);
    let scale = f32::from_bits(k.to_bits().wrapping_sub(MAGIC.to_bits()).wrapping_add(127) << 23);
    // 2^f on [−½, ½].
    let p = 1.0
        + f * (0.693_147_2
            + f * (0.240_226_5 + f * (0.055_504_11 + f * (0.009_618_129 + f * (0.001_333_355 + f * 0.000_154_035_3)))));
    scale * p
}

impl Scalar for f64 {
    unsafe fn gemm(
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
        matrixmultiply::dgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
    }

    fn erf(self) -> f64 {
        libm::erf(self)
    }

    #[inline]
    fn of(x: f64) -> f64 {
        x
    }

    #[inline]
    fn as_f64(self) -> f64 {
        self
    }
}

impl Scalar for f32 {
    unsafe fn gemm(
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
        matrixmultiply::sgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
    }

    /// Rational approximation (absolute error below 1.5e-7), several times
    /// faster than `erff`.
    #[inline]
    fn erf(self) -> f32 {
        let x = self.abs();
        (1.0 - erfc_poly(x) * (-x * x).exp()).copysign(self)
    }

    /// Shares one `exp(−x²/2)` between `Φ` and the density.
    #[inline(always)]
    fn gelu_and_slope(self) -> (f32, f32) {
        let e = exp_neg(0.5 * self * self);
        let erf_abs = 1.0 - erfc_poly(self.abs() * std::f32::consts::FRAC_1_SQRT_2) * e;
        let erf = if self < 0.0 { -erf_abs } else { erf_abs };
        let cdf = 0.5 * (1.0 + erf);
        (self * cdf, cdf + self * e * INV_SQRT_2PI as f32)
    }

    fn gelu_slice(x: &[f32], v: &mut [f32], s: &mut [f32]) {
        let n = x.len().min(v.len()).min(s.len());
        for i in 0..n {
            (v[i], s[i]) = x[i].gelu_and_slope();
        }
    }

    #[inline]
    fn of(x: f64) -> f32 {
        x as f32
    }

    #[inline]
    fn as_f64(self) -> f64 {
        self as f64
    }
}
