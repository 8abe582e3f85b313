//! Working-precision formats.
//!
//! Every component value is stored as an `f64` that is exactly representable
//! in the selected binary format. Arithmetic in binary16 and binary32 is
//! emulated by evaluating each primitive in binary64 and rounding the result
//! once to the target format. Because binary64 carries more than `2p + 2`
//! significand bits for both narrower formats, the single rounding yields the
//! correctly rounded (round-to-nearest-even) result of `+ - * /` and `sqrt`.

use serde::{Deserialize, Serialize};
use std::fmt;
use std::str::FromStr;

use crate::error::Error;

/// IEEE-754 binary interchange format used for every component.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    B16,
    B32,
    B64,
}

impl Precision {
    pub const ALL: [Precision; 3] = [Precision::B16, Precision::B32, Precision::B64];

    /// Significand bits including the implicit bit.
    pub const fn significand_bits(self) -> u32 {
        match self {
            Precision::B16 => 11,
            Precision::B32 => 24,
            Precision::B64 => 53,
        }
    }

    /// Smallest positive subnormal.
    pub fn min_positive(self) -> f64 {
        match self {
            Precision::B16 => pow2(-24),
            Precision::B32 => pow2(-149),
            Precision::B64 => f64::from_bits(1),
        }
    }

    /// Smallest positive normal number.
    pub fn min_normal(self) -> f64 {
        match self {
            Precision::B16 => pow2(-14),
            Precision::B32 => pow2(-126),
            Precision::B64 => f64::MIN_POSITIVE,
        }
    }

    pub fn max_finite(self) -> f64 {
        match self {
            Precision::B16 => 65504.0,
            Precision::B32 => f32::MAX as f64,
            Precision::B64 => f64::MAX,
        }
    }

    /// Unit roundoff `2^-p`.
    pub fn unit_roundoff(self) -> f64 {
        pow2(-(self.significand_bits() as i32))
    }

    /// Rounds a binary64 value to the nearest representable value of this format.
    #[inline]
    pub fn round(self, x: f64) -> f64 {
        match self {
            Precision::B16 => round_f16(x),
            Precision::B32 => x as f32 as f64,
            Precision::B64 => x,
        }
    }

    /// Whether `x` is exactly representable (NaN counts as representable).
    pub fn is_representable(self, x: f64) -> bool {
        x.is_nan() || self.round(x) == x
    }

    /// Unit in the last place of `x` in this format. Zero maps to the
    /// subnormal quantum.
    pub fn ulp(self, x: f64) -> f64 {
        let a = x.abs();
        if !a.is_finite() {
            return f64::NAN;
        }
        if a < self.min_normal() {
            return self.min_positive();
        }
        let e = exponent(a);
        pow2(e - (self.significand_bits() as i32 - 1))
    }

    #[inline]
    pub fn add(self, a: f64, b: f64) -> f64 {
        self.round(a + b)
    }

    #[inline]
    pub fn sub(self, a: f64, b: f64) -> f64 {
        self.round(a - b)
    }

    #[inline]
    pub fn mul(self, a: f64, b: f64) -> f64 {
        self.round(a * b)
    }

    #[inline]
    pub fn div(self, a: f64, b: f64) -> f64 {
        self.round(a / b)
    }

    #[inline]
    pub fn sqrt(self, a: f64) -> f64 {
        self.round(a.sqrt())
    }

    /// Elementary function evaluated in binary64 and rounded once.
    #[inline]
    pub fn apply(self, f: impl Fn(f64) -> f64, a: f64) -> f64 {
        self.round(f(a))
    }

    pub const fn tag(self) -> &'static str {
        match self {
            Precision::B16 => "b16",
            Precision::B32 => "b32",
            Precision::B64 => "b64",
        }
    }

    pub(crate) const fn code(self) -> u8 {
        match self {
            Precision::B16 => 16,
            Precision::B32 => 32,
            Precision::B64 => 64,
        }
    }

    pub(crate) fn from_code(code: u8) -> Option<Self> {
        match code {
            16 => Some(Precision::B16),
            32 => Some(Precision::B32),
            64 => Some(Precision::B64),
            _ => None,
        }
    }
}

impl fmt::Display for Precision {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

impl FromStr for Precision {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "b16" | "f16" | "half" | "float16" => Ok(Precision::B16),
            "b32" | "f32" | "single" | "float32" => Ok(Precision::B32),
            "b64" | "f64" | "double" | "float64" => Ok(Precision::B64),
            other => Err(Error::InvalidArgument(format!("unknown precision `{other}`"))),
        }
    }
}

/// Compile-time selected format, so hot kernels monomorphize their rounding.
pub trait Format: Copy + Send + Sync + 'static {
    const PRECISION: Precision;

    /// The sum of any two finite values of the format is exact in binary64.
    const EXACT_SUMS: bool;

    /// The product of any two finite values of the format is exact in binary64.
    const EXACT_PRODUCTS: bool;

    fn round(x: f64) -> f64;
}

#[derive(Clone, Copy, Debug)]
pub struct Half;

#[derive(Clone, Copy, Debug)]
pub struct Single;

#[derive(Clone, Copy, Debug)]
pub struct Double;

impl Format for Half {
    const EXACT_SUMS: bool = true;
    const EXACT_PRODUCTS: bool = true;
    const PRECISION: Precision = Precision::B16;

    #[inline(always)]
    fn round(x: f64) -> f64 {
        round_f16(x)
    }
}

impl Format for Single {
    const EXACT_SUMS: bool = false;
    const EXACT_PRODUCTS: bool = true;
    const PRECISION: Precision = Precision::B32;

    #[inline(always)]
    fn round(x: f64) -> f64 {
        x as f32 as f64
    }
}

impl Format for Double {
    const EXACT_SUMS: bool = false;
    const EXACT_PRODUCTS: bool = false;
    const PRECISION: Precision = Precision::B64;

    #[inline(always)]
    fn round(x: f64) -> f64 {
        x
    }
}

/// Runs `$body` with `$F` bound to the [`Format`] type matching `$prec`.
#[macro_export]
macro_rules! with_format {
    ($prec:expr, $F:ident => $body:expr) => {
        match $prec {
            $crate::precision::Precision::B16 => {
                type $F = $crate::precision::Half;
                $body
            }
            $crate::precision::Precision::B32 => {
                type $F = $crate::precision::Single;
                $body
            }
            $crate::precision::Precision::B64 => {
                type $F = $crate::precision::Double;
                $body
            }
        }
    };
}

/// `2^e` for exponents in the normal or subnormal binary64 range.
pub fn pow2(e: i32) -> f64 {
    if e >= -1022 {
        f64::from_bits(((e + 1023) as u64) << 52)
    } else {
        f64::from_bits(1u64 << (e + 1074))
    }
}

/// Unbiased binary exponent of a finite nonzero binary64 value.
fn exponent(a: f64) -> i32 {
    let bits = a.to_bits();
    let biased = ((bits >> 52) & 0x7ff) as i32;
    if biased == 0 {
        // subnormal binary64
        let m = bits & ((1u64 << 52) - 1);
        -1074 + (63 - m.leading_zeros() as i32)
    } else {
        biased - 1023
    }
}

/// Round-to-nearest-even into binary16, returned as binary64.
#[inline]
fn round_f16(x: f64) -> f64 {
    let a = x.abs();
    // 65520 is the midpoint between 65504 and 2^16; ties go to the even
    // neighbour 2^16, which overflows.
    if !(a < 65520.0) {
        return if x.is_nan() { x } else { f64::INFINITY.copysign(x) };
    }
    // scale so the quantum is 1, round through the 2^52 binade, scale back
    let e = if a < 6.103515625e-5 { -14 } else { ((a.to_bits() >> 52) & 0x7ff) as i64 - 1023 };
    let inv_quantum = f64::from_bits(((1023 + 10 - e) as u64) << 52);
    let quantum = f64::from_bits(((1023 - 10 + e) as u64) << 52);
    const SHIFT: f64 = 6755399441055744.0; // 1.5 * 2^52
    (((x * inv_quantum) + SHIFT - SHIFT) * quantum).copysign(x)
}

#[cfg(test)]
mod tests {
    use super::*;
    use half::f16;

    #[test]
    fn f16_grid_is_fixed_and_midpoints_tie_to_even() {
        let mut finite: Vec<f64> = (0u16..0x7c00).map(|b| f16::from_bits(b).to_f64()).collect();
        finite.sort_by(|a, b| a.partial_cmp(b).unwrap());
        for w in finite.windows(2) {
            let (lo, hi) = (w[0], w[1]);
            assert_eq!(Precision::B16.round(lo), lo);
            assert_eq!(Precision::B16.round(-lo), -lo);
            let mid = 0.5 * (lo + hi);
            let lo_even = f16::from_f64(lo).to_bits() % 2 == 0;
            let expect = if lo_even { lo } else { hi };
            assert_eq!(Precision::B16.round(mid), expect, "midpoint of {lo} and {hi}");
            let nudge = (hi - lo) * 1e-6;
            assert_eq!(Precision::B16.round(mid - nudge), lo);
            assert_eq!(Precision::B16.round(mid + nudge), hi);
        }
    }

    #[test]
    fn f16_overflow_and_specials() {
        let p = Precision::B16;
        assert_eq!(p.round(65504.0), 65504.0);
        assert_eq!(p.round(65519.99), 65504.0);
        assert_eq!(p.round(65520.0), f64::INFINITY);
        assert_eq!(p.round(-1e9), f64::NEG_INFINITY);
        assert!(p.round(f64::NAN).is_nan());
        assert_eq!(p.round(pow2(-25)), 0.0);
        assert_eq!(p.round(pow2(-25) * 1.0001), pow2(-24));
        assert!(p.round(-1e-30).is_sign_negative());
    }

    #[test]
    fn ulp_and_constants() {
        assert_eq!(Precision::B32.ulp(1.0), pow2(-23));
        assert_eq!(Precision::B16.ulp(1.0), pow2(-10));
        assert_eq!(Precision::B16.ulp(0.0), pow2(-24));
        assert_eq!(Precision::B64.ulp(1.0), f64::EPSILON);
        assert_eq!(Precision::B16.min_positive(), pow2(-24));
        assert_eq!(Precision::B32.min_positive(), f32::from_bits(1) as f64);
        assert_eq!(pow2(-1074), f64::from_bits(1));
        assert_eq!(exponent(f64::from_bits(1)), -1074);
    }

    #[test]
    fn parses_tags() {
        assert_eq!("b16".parse::<Precision>().unwrap(), Precision::B16);
        assert_eq!("F32".parse::<Precision>().unwrap(), Precision::B32);
        assert!("b8".parse::<Precision>().is_err());
    }
}
