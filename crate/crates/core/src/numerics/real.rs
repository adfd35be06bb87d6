use std::fmt::{Debug, Display};
use std::ops::{Add, AddAssign, Div, Mul, MulAssign, Neg, Sub, SubAssign};

use twofloat::TwoFloat;

/// Floating-point element type of a [`Tensor`](super::Tensor).
///
/// Implemented for `f64` (the default everywhere tolerances matter), `f32`
/// (the trainer's single-precision mode) and [`TwoFloat`] double-double
/// values (the high-precision finite-difference oracle).
pub trait Real:
    Copy
    + PartialOrd
    + Debug
    + Display
    + Default
    + Add<Output = Self>
    + Sub<Output = Self>
    + Mul<Output = Self>
    + Div<Output = Self>
    + Neg<Output = Self>
    + AddAssign
    + SubAssign
    + MulAssign
    + Send
    + Sync
    + 'static
{
    const NAME: &'static str;
    /// Width in bytes, used by the checkpoint format.
    const BYTES: usize;

    fn of(x: f64) -> Self;
    fn as_f64(self) -> f64;
    fn write_le(self, out: &mut Vec<u8>);
    fn read_le(bytes: &[u8]) -> Self;

    fn zero() -> Self {
        Self::of(0.0)
    }
    fn one() -> Self {
        Self::of(1.0)
    }
    fn neg_infinity() -> Self {
        Self::of(f64::NEG_INFINITY)
    }
    fn exp(self) -> Self;
    fn ln(self) -> Self;
    fn sqrt(self) -> Self;
    fn recip(self) -> Self {
        Self::one() / self
    }
    fn abs(self) -> Self {
        if self < Self::zero() {
            -self
        } else {
            self
        }
    }
    fn max(self, other: Self) -> Self {
        if other > self {
            other
        } else {
            self
        }
    }
    fn is_finite(self) -> bool {
        self.as_f64().is_finite()
    }
    fn powi(self, n: i32) -> Self {
        let mut out = Self::one();
        for _ in 0..n.unsigned_abs() {
            out *= self;
        }
        if n < 0 {
            out.recip()
        } else {
            out
        }
    }
}

/// Sum in iteration order.
pub fn sum<T: Real>(xs: impl IntoIterator<Item = T>) -> T {
    xs.into_iter().fold(T::zero(), |a, b| a + b)
}

macro_rules! native {
    ($t:ty, $bytes:expr) => {
        impl Real for $t {
            const NAME: &'static str = stringify!($t);
            const BYTES: usize = $bytes;

            #[inline]
            fn of(x: f64) -> Self {
                x as $t
            }
            #[inline]
            fn as_f64(self) -> f64 {
                self as f64
            }
            fn write_le(self, out: &mut Vec<u8>) {
                out.extend_from_slice(&self.to_le_bytes());
            }
            fn read_le(bytes: &[u8]) -> Self {
                let mut b = [0u8; $bytes];
                b.copy_from_slice(&bytes[..$bytes]);
                <$t>::from_le_bytes(b)
            }
            #[inline]
            fn exp(self) -> Self {
                <$t>::exp(self)
            }
            #[inline]
            fn ln(self) -> Self {
                <$t>::ln(self)
            }
            #[inline]
            fn sqrt(self) -> Self {
                <$t>::sqrt(self)
            }
            #[inline]
            fn recip(self) -> Self {
                <$t>::recip(self)
            }
            #[inline]
            fn abs(self) -> Self {
                <$t>::abs(self)
            }
            #[inline]
            fn max(self, other: Self) -> Self {
                <$t>::max(self, other)
            }
            #[inline]
            fn is_finite(self) -> bool {
                <$t>::is_finite(self)
            }
            #[inline]
            fn powi(self, n: i32) -> Self {
                <$t>::powi(self, n)
            }
        }
    };
}

native!(f64, 8);
native!(f32, 4);

/// `exp` to full double-double accuracy: reduce by multiples of ln 2, scale
/// the remainder down by 2⁻¹⁰, sum its Taylor series and square back up.
fn dd_exp(x: TwoFloat) -> TwoFloat {
    let hi = x.hi();
    if hi.is_nan() {
        return x;
    }
    if hi > 709.0 {
        return TwoFloat::from(f64::INFINITY);
    }
    if hi < -745.0 {
        return TwoFloat::from(0.0);
    }
    let k = (hi / std::f64::consts::LN_2).round();
    let r = (x - twofloat::consts::LN_2 * k) / 1024.0;
    let mut term = TwoFloat::from(1.0);
    let mut acc = TwoFloat::from(1.0);
    for i in 1..=12 {
        term = term * r / i as f64;
        acc += term;
    }
    for _ in 0..10 {
        acc = acc * acc;
    }
    // Two exact power-of-two factors keep 2ᵏ representable near the limits.
    let half = (k / 2.0).trunc();
    acc * 2f64.powi(half as i32) * 2f64.powi((k - half) as i32)
}

/// `ln` by one Newton step on `exp` from the double-precision estimate.
fn dd_ln(x: TwoFloat) -> TwoFloat {
    let hi = x.hi();
    if !(hi > 0.0) || hi.is_infinite() {
        return TwoFloat::from(hi.ln());
    }
    let y = TwoFloat::from(hi.ln());
    y + x * dd_exp(-y) - 1.0
}

/// Double-double number: an unevaluated sum of two `f64`s carrying about 32
/// significant digits.
///
/// Addition, multiplication and square root come from [`TwoFloat`]. Division
/// is done here by long division with three quotient digits, since
/// `TwoFloat / TwoFloat` only reaches `f64` accuracy (`x / x` is off by an
/// ulp of 1).
#[derive(Debug, Clone, Copy, Default, PartialEq, PartialOrd)]
pub struct F64x2(pub TwoFloat);

impl F64x2 {
    pub fn hi(self) -> f64 {
        self.0.hi()
    }

    pub fn lo(self) -> f64 {
        self.0.lo()
    }
}

impl Display for F64x2 {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        Display::fmt(&self.0, f)
    }
}

impl From<f64> for F64x2 {
    fn from(x: f64) -> Self {
        F64x2(TwoFloat::from(x))
    }
}

impl Add for F64x2 {
    type Output = Self;
    fn add(self, rhs: Self) -> Self {
        F64x2(self.0 + rhs.0)
    }
}

impl Sub for F64x2 {
    type Output = Self;
    fn sub(self, rhs: Self) -> Self {
        F64x2(self.0 - rhs.0)
    }
}

impl Mul for F64x2 {
    type Output = Self;
    fn mul(self, rhs: Self) -> Self {
        F64x2(self.0 * rhs.0)
    }
}

impl Div for F64x2 {
    type Output = Self;
    fn div(self, rhs: Self) -> Self {
        let d = rhs.0.hi();
        let q1 = self.0.hi() / d;
        if !q1.is_finite() || d == 0.0 {
            return F64x2::from(q1);
        }
        let r = self.0 - rhs.0 * q1;
        let q2 = r.hi() / d;
        let r = r - rhs.0 * q2;
        let q3 = r.hi() / d;
        F64x2(TwoFloat::new_add(q1, q2) + q3)
    }
}

impl Neg for F64x2 {
    type Output = Self;
    fn neg(self) -> Self {
        F64x2(-self.0)
    }
}

impl AddAssign for F64x2 {
    fn add_assign(&mut self, rhs: Self) {
        *self = *self + rhs;
    }
}

impl SubAssign for F64x2 {
    fn sub_assign(&mut self, rhs: Self) {
        *self = *self - rhs;
    }
}

impl MulAssign for F64x2 {
    fn mul_assign(&mut self, rhs: Self) {
        *self = *self * rhs;
    }
}

impl Real for F64x2 {
    const NAME: &'static str = "f64x2";
    const BYTES: usize = 16;

    fn of(x: f64) -> Self {
        F64x2::from(x)
    }
    fn as_f64(self) -> f64 {
        self.hi() + self.lo()
    }
    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.hi().to_le_bytes());
        out.extend_from_slice(&self.lo().to_le_bytes());
    }
    fn read_le(bytes: &[u8]) -> Self {
        let hi = f64::read_le(&bytes[..8]);
        let lo = f64::read_le(&bytes[8..16]);
        F64x2(TwoFloat::from(hi) + TwoFloat::from(lo))
    }
    fn exp(self) -> Self {
        F64x2(dd_exp(self.0))
    }
    fn ln(self) -> Self {
        F64x2(dd_ln(self.0))
    }
    fn sqrt(self) -> Self {
        F64x2(self.0.sqrt())
    }
    fn is_finite(self) -> bool {
        self.hi().is_finite()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn dd(x: f64) -> F64x2 {
        F64x2::from(x)
    }

    fn rel(a: F64x2, b: F64x2) -> f64 {
        ((a - b) / b).hi().abs()
    }

    #[test]
    fn double_double_exp_and_ln_reach_beyond_f64() {
        let mut worst: f64 = 0.0;
        for i in 0..400 {
            let x = dd(-20.0 + 0.1 * i as f64) + dd(1e-19 * i as f64);
            let y = dd(0.3173) + dd(2e-18);
            worst = worst.max(rel(Real::exp(x + y), Real::exp(x) * Real::exp(y)));
            let e = Real::exp(x);
            worst = worst.max(((Real::ln(e) - x).hi()).abs() / x.hi().abs().max(1.0));
        }
        assert!(worst < 1e-28, "{worst:e}");
        assert!(rel(Real::exp(dd(1.0)), F64x2(twofloat::consts::E)) < 1e-29);
        assert!(rel(Real::ln(dd(2.0)), F64x2(twofloat::consts::LN_2)) < 1e-30);
    }

    #[test]
    fn double_double_edges() {
        assert_eq!(Real::exp(dd(-1000.0)).hi(), 0.0);
        assert!(Real::exp(dd(1000.0)).hi().is_infinite());
        assert!(Real::ln(dd(0.0)).hi().is_infinite());
        assert!(Real::ln(dd(-1.0)).hi().is_nan());
        let mut buf = Vec::new();
        let x = dd(1.0) / dd(3.0);
        x.write_le(&mut buf);
        assert_eq!(<F64x2 as Real>::read_le(&buf), x);
    }

    #[test]
    fn double_double_division_is_exact_to_working_precision() {
        let x = dd(0.3) + dd(1e-18);
        assert_eq!(x / x, dd(1.0));
        let third = dd(1.0) / dd(3.0);
        assert!(((third * dd(3.0)) - dd(1.0)).hi().abs() < 1e-31);
        let y = dd(2e-6) + dd(3e-24);
        assert!(rel((x / y) * y, x) < 1e-31);
        assert!((dd(1.0) / dd(0.0)).hi().is_infinite());
    }

    #[test]
    fn defaults_match_native() {
        assert_eq!(Real::powi(3.0f64, -2), 1.0 / 9.0);
        assert_eq!(Real::powi(dd(3.0), 3).hi(), 27.0);
        assert_eq!(Real::max(dd(-1.0), dd(2.0)).hi(), 2.0);
        assert_eq!(Real::abs(dd(-1.5)).hi(), 1.5);
        assert_eq!(sum([1.0f64, 2.0, 3.0]), 6.0);
    }
}
