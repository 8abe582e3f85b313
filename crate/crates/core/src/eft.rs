//! Error-free transformations.
//!
//! These are the only routines that split a rounding error out exactly. They
//! are generic over the working [`Format`]; runtime-dispatched and elementwise
//! wrappers are provided for callers holding a [`Precision`] value.
//!
//! Non-finite inputs propagate as NaN/Inf and are never trapped. A product
//! error below the format's smallest subnormal is lost, exactly as the
//! underlying IEEE multiply would lose it.

use std::sync::atomic::{AtomicBool, Ordering};

use crate::precision::{pow2, Format, Precision};
use crate::with_format;

static FMA_ENABLED: AtomicBool = AtomicBool::new(true);

/// Selects the product kernel used by [`two_prod_auto`].
///
/// Both kernels are bitwise identical wherever both are defined, so the flag
/// only trades speed; it is recorded in every experiment report.
pub fn set_fma_enabled(enabled: bool) {
    FMA_ENABLED.store(enabled, Ordering::Relaxed);
}

pub fn fma_enabled() -> bool {
    FMA_ENABLED.load(Ordering::Relaxed)
}

/// Knuth's two-sum: `s = fl(a + b)` and `s + e == a + b`.
#[inline(always)]
pub fn two_sum<F: Format>(a: f64, b: f64) -> (f64, f64) {
    if F::EXACT_SUMS {
        // a + b is exact in binary64, so the error is a plain difference
        let t = a + b;
        let s = F::round(t);
        if s.is_finite() {
            return (s, t - s);
        }
    }
    let s = F::round(a + b);
    let bv = F::round(s - a);
    let av = F::round(s - bv);
    let br = F::round(b - bv);
    let ar = F::round(a - av);
    (s, F::round(ar + br))
}

/// Dekker's two-sum, valid when `|a| >= |b|` or `a == 0`.
#[inline(always)]
pub fn fast_two_sum<F: Format>(a: f64, b: f64) -> (f64, f64) {
    if F::EXACT_SUMS {
        return two_sum::<F>(a, b);
    }
    let s = F::round(a + b);
    let e = F::round(b - F::round(s - a));
    (s, e)
}

/// Splitting constant exponent `ceil(p / 2)`.
const fn split_shift(p: u32) -> i32 {
    p.div_ceil(2) as i32
}

/// Veltkamp/Dekker split with constant `2^ceil(p/2) + 1`: `a == hi + lo` and
/// both halves are short enough that their pairwise products are exact.
///
/// Inputs large enough to overflow the constant multiply are split by
/// truncating the significand instead, so `hi` never rounds up past the
/// largest finite value.
#[inline(always)]
pub fn split<F: Format>(a: f64) -> (f64, f64) {
    let p = F::PRECISION.significand_bits();
    let s = split_shift(p);
    let thresh = F::PRECISION.max_finite() / pow2(s + 1);
    if a.abs() > thresh && a.is_finite() {
        // large values are normal in binary64; keep the top p - s bits
        let drop = 53 - (p - s as u32);
        let hi = f64::from_bits(a.to_bits() & !((1u64 << drop) - 1));
        (hi, F::round(a - hi))
    } else {
        let t = F::round((pow2(s) + 1.0) * a);
        let hi = F::round(t - F::round(t - a));
        let lo = F::round(a - hi);
        (hi, lo)
    }
}

/// Dekker's two-product built on [`split`].
///
/// Near the top of the range the rounded-up halves can overflow even though
/// `a * b` does not; the larger factor is then scaled down by a power of two
/// and the result scaled back, both exactly.
#[inline(always)]
pub fn two_prod<F: Format>(a: f64, b: f64) -> (f64, f64) {
    let p = F::round(a * b);
    let k = split_shift(F::PRECISION.significand_bits()) + 2;
    if p.abs() > F::PRECISION.max_finite() / pow2(k) && p.is_finite() {
        let (a, b) = if a.abs() >= b.abs() { (a, b) } else { (b, a) };
        let (q, e) = dekker_product::<F>(a * pow2(-k), b);
        return (q * pow2(k), e * pow2(k));
    }
    dekker_product::<F>(a, b)
}

#[inline(always)]
fn dekker_product<F: Format>(a: f64, b: f64) -> (f64, f64) {
    let p = F::round(a * b);
    let (ah, al) = split::<F>(a);
    let (bh, bl) = split::<F>(b);
    let t1 = F::round(F::round(ah * bh) - p);
    let t2 = F::round(t1 + F::round(ah * bl));
    let t3 = F::round(t2 + F::round(al * bh));
    let e = F::round(t3 + F::round(al * bl));
    (p, e)
}

/// Two-product through a fused multiply-add: `e = fma(a, b, -p)`.
///
/// The fused operation is evaluated in binary64 and rounded once; because the
/// exact residual is representable in the working format this is exact.
#[inline(always)]
pub fn two_prod_fma<F: Format>(a: f64, b: f64) -> (f64, f64) {
    let p = F::round(a * b);
    // when a * b is exact in binary64 so is a * b - p, matching the fused result
    let e = if F::EXACT_PRODUCTS { F::round(a * b - p) } else { F::round(a.mul_add(b, -p)) };
    (p, e)
}

/// Two-product using the kernel selected by [`set_fma_enabled`].
#[inline(always)]
pub fn two_prod_auto<F: Format>(a: f64, b: f64) -> (f64, f64) {
    if fma_enabled() {
        two_prod_fma::<F>(a, b)
    } else {
        two_prod::<F>(a, b)
    }
}

/// Runtime-dispatched scalar entry points.
pub mod scalar {
    use super::*;

    pub fn two_sum(prec: Precision, a: f64, b: f64) -> (f64, f64) {
        with_format!(prec, F => super::two_sum::<F>(a, b))
    }

    pub fn split(prec: Precision, a: f64) -> (f64, f64) {
        with_format!(prec, F => super::split::<F>(a))
    }

    pub fn two_prod(prec: Precision, a: f64, b: f64) -> (f64, f64) {
        with_format!(prec, F => super::two_prod::<F>(a, b))
    }

    pub fn two_prod_fma(prec: Precision, a: f64, b: f64) -> (f64, f64) {
        with_format!(prec, F => super::two_prod_fma::<F>(a, b))
    }
}

fn elementwise(
    a: &[f64],
    b: &[f64],
    f: impl Fn(f64, f64) -> (f64, f64),
) -> (Vec<f64>, Vec<f64>) {
    assert_eq!(a.len(), b.len(), "elementwise EFT needs equal lengths");
    a.iter().zip(b).map(|(&x, &y)| f(x, y)).unzip()
}

/// Elementwise [`two_sum`] over equal-length slices.
pub fn two_sum_slices(prec: Precision, a: &[f64], b: &[f64]) -> (Vec<f64>, Vec<f64>) {
    with_format!(prec, F => elementwise(a, b, two_sum::<F>))
}

/// Elementwise [`two_prod_auto`] over equal-length slices.
pub fn two_prod_slices(prec: Precision, a: &[f64], b: &[f64]) -> (Vec<f64>, Vec<f64>) {
    with_format!(prec, F => elementwise(a, b, two_prod_auto::<F>))
}

/// Elementwise [`split`].
pub fn split_slice(prec: Precision, a: &[f64]) -> (Vec<f64>, Vec<f64>) {
    with_format!(prec, F => a.iter().map(|&x| split::<F>(x)).unzip())
}
