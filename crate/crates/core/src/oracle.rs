//! Ground-truth arithmetic for grading MCF results.
//!
//! Ring operations use exact rationals, so there is no oracle error at all for
//! `+ - * /`. Transcendental functions are evaluated in binary fixed point with
//! a caller-chosen number of bits plus guard bits; the returned rational is
//! within `2^-(bits-2)` relative of the true value.
//!
//! Nothing here is meant to be fast; the oracle never runs inside training.

use num_bigint::{BigInt, Sign};
use num_rational::BigRational;
use num_traits::{One, Signed, ToPrimitive, Zero};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::mct::McTensor;
use crate::precision::Precision;

/// Exact rational number.
pub type ExactScalar = BigRational;

/// Default working precision of [`hp_transcendental`].
pub const DEFAULT_BITS: u32 = 160;

const GUARD_BITS: u32 = 32;

/// Exact value of a finite float.
///
/// # Panics
/// On NaN or infinity.
pub fn exact(x: f64) -> ExactScalar {
    BigRational::from_float(x).expect("finite value")
}

/// Exact sum of a component slice.
pub fn exact_sum(components: &[f64]) -> ExactScalar {
    components
        .iter()
        .fold(ExactScalar::zero(), |acc, &c| acc + exact(c))
}

/// Exact value of every element of an MC tensor.
pub fn value_of(x: &McTensor) -> Vec<ExactScalar> {
    (0..x.numel()).map(|i| exact_sum(x.element(i))).collect()
}

/// Nearest `f64` to a rational.
pub fn to_f64(x: &ExactScalar) -> f64 {
    x.to_f64().unwrap_or(f64::NAN)
}

/// `|a - t| / |t|`, or the absolute error when `t == 0`.
pub fn rel_error(approx: &ExactScalar, truth: &ExactScalar) -> f64 {
    let diff = (approx - truth).abs();
    if truth.is_zero() {
        to_f64(&diff)
    } else {
        to_f64(&(diff / truth.abs()))
    }
}

/// Draws `(10 - z)^m` with `z ~ N(0, 1)`, rounded to `precision`.
pub fn sample_magnitude(m: i32, precision: Precision, rng: &mut impl Rng) -> f64 {
    let z: f64 = rng.sample(StandardNormal);
    precision.round((10.0 - z).powi(m))
}

/// A random nonoverlapping expansion of `nc` components whose leading
/// component is [`sample_magnitude`]. Each further component is uniform in
/// `(-ulp/2, ulp/2)` of its predecessor, rounded to `precision`.
pub fn sample_expansion(m: i32, nc: usize, precision: Precision, rng: &mut impl Rng) -> Vec<f64> {
    let mut out = Vec::with_capacity(nc);
    out.push(sample_magnitude(m, precision, rng));
    for i in 1..nc {
        let prev: f64 = out[i - 1];
        let u: f64 = rng.gen_range(-1.0..1.0);
        let c = if prev == 0.0 {
            0.0
        } else {
            precision.round(u * precision.ulp(prev) / 2.0)
        };
        out.push(c);
    }
    out
}

/// Rounds a rational to the nearest value of `precision` (ties to even).
pub fn round_to(x: &ExactScalar, precision: Precision) -> f64 {
    // The f64 conversion is correctly rounded; re-rounding to a format with at
    // most 24 bits can only double-round on an exact binary64 midpoint, which
    // is repaired below by comparing against the exact value.
    let d = to_f64(x);
    let r = precision.round(d);
    if precision == Precision::B64 || !r.is_finite() || r == d {
        return r;
    }
    let ulp = precision.ulp(r);
    let candidates = [r - ulp, r, r + ulp];
    let mut best = r;
    let mut best_err = (exact(r) - x).abs();
    for &c in &candidates {
        if precision.round(c) != c {
            continue;
        }
        let e = (exact(c) - x).abs();
        if e < best_err {
            best = c;
            best_err = e;
        }
    }
    best
}

/// Transcendental functions available in [`hp_transcendental`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Transcendental {
    Exp,
    Log,
    Sqrt,
    Arcosh,
}

/// Evaluates `f(x)` to about `bits` significant bits.
pub fn hp_transcendental(f: Transcendental, x: &ExactScalar, bits: u32) -> Result<ExactScalar> {
    match f {
        Transcendental::Exp => hp_exp(x, bits),
        Transcendental::Log => hp_log(x, bits),
        Transcendental::Sqrt => hp_sqrt(x, bits),
        Transcendental::Arcosh => hp_arcosh(x, bits),
    }
}

fn pow2_int(k: u64) -> BigInt {
    BigInt::one() << k
}

/// `floor(log2 |x|)` for nonzero `x`.
fn ilog2(x: &ExactScalar) -> i64 {
    let n = x.numer().abs();
    let d = x.denom().abs();
    let mut e = n.bits() as i64 - d.bits() as i64;
    // now 2^(e-1) < n/d < 2^(e+1)
    let scaled = |e: i64| -> bool {
        // n / d >= 2^e ?
        if e >= 0 {
            n >= (&d << e as u64)
        } else {
            (&n << (-e) as u64) >= d
        }
    };
    if !scaled(e) {
        e -= 1;
    }
    e
}

/// Rounds `x * 2^w` to the nearest integer.
fn to_fixed(x: &ExactScalar, w: u64) -> BigInt {
    let scaled = x * ExactScalar::from_integer(pow2_int(w));
    scaled.round().to_integer()
}

fn from_fixed(v: BigInt, w: u64) -> ExactScalar {
    ExactScalar::new(v, pow2_int(w))
}

/// `ln 2` in fixed point with `w` fractional bits, via
/// `2 atanh(1/3) = 2 sum 1 / ((2k+1) 3^(2k+1))`.
fn ln2_fixed(w: u64) -> BigInt {
    let one = pow2_int(w + 8);
    let mut power: BigInt = &one / 3u32; // 3^-(2k+1)
    let mut sum = BigInt::zero();
    let mut k = 0u64;
    while !power.is_zero() {
        sum += &power / (2 * k + 1);
        power /= 9u32;
        k += 1;
    }
    (sum * 2) >> 8
}

/// `atanh(z)` for `|z| <= 1/3` in fixed point with `w` fractional bits.
fn atanh_fixed(z: &BigInt, w: u64) -> BigInt {
    let z2 = (z * z) >> w;
    let mut power = z.clone();
    let mut sum = BigInt::zero();
    let mut k = 0u64;
    while !power.is_zero() {
        sum += &power / (2 * k + 1);
        power = (power * &z2) >> w;
        k += 1;
    }
    sum
}

fn hp_exp(x: &ExactScalar, bits: u32) -> Result<ExactScalar> {
    let xf = to_f64(x);
    if !xf.is_finite() || xf.abs() > 1e6 {
        return Err(Error::Domain(format!("exp argument {xf} out of oracle range")));
    }
    const HALVINGS: u64 = 16;
    let w = (bits + GUARD_BITS) as u64 + HALVINGS + 8;
    let k = (xf / std::f64::consts::LN_2).round() as i64;
    let ln2 = from_fixed(ln2_fixed(w + 16), w + 16);
    let r = x - ExactScalar::from_integer(BigInt::from(k)) * ln2;
    // r / 2^HALVINGS with w fractional bits
    let rf = to_fixed(&r, w - HALVINGS);
    let one = pow2_int(w);
    let mut sum = one.clone();
    let mut term = one;
    let mut n = 1u64;
    loop {
        term = (term * &rf) >> w;
        term /= n;
        if term.is_zero() {
            break;
        }
        sum += &term;
        n += 1;
    }
    for _ in 0..HALVINGS {
        sum = (&sum * &sum) >> w;
    }
    let mut out = from_fixed(sum, w);
    if k >= 0 {
        out *= ExactScalar::from_integer(pow2_int(k as u64));
    } else {
        out /= ExactScalar::from_integer(pow2_int((-k) as u64));
    }
    Ok(out)
}

fn hp_log(x: &ExactScalar, bits: u32) -> Result<ExactScalar> {
    if !x.is_positive() {
        return Err(Error::Domain("log of a non-positive value".into()));
    }
    let e = ilog2(x);
    // y in [1, 2)
    let y = if e >= 0 {
        x / ExactScalar::from_integer(pow2_int(e as u64))
    } else {
        x * ExactScalar::from_integer(pow2_int((-e) as u64))
    };
    let one = ExactScalar::one();
    let z = (&y - &one) / (&y + &one);
    // keep `bits` bits relative to the result even when it is tiny
    let extra = if z.is_zero() { 0 } else { (-ilog2(&z)).max(0) as u64 };
    let w = (bits + GUARD_BITS) as u64 + extra + 8;
    let s = atanh_fixed(&to_fixed(&z, w), w);
    let mut out = from_fixed(s * 2, w);
    if e != 0 {
        out += ExactScalar::from_integer(BigInt::from(e)) * from_fixed(ln2_fixed(w), w);
    }
    Ok(out)
}

fn hp_sqrt(x: &ExactScalar, bits: u32) -> Result<ExactScalar> {
    if x.is_negative() {
        return Err(Error::Domain("sqrt of a negative value".into()));
    }
    if x.is_zero() {
        return Ok(ExactScalar::zero());
    }
    // sqrt(n/d) = sqrt(n d) / d, evaluated with enough fractional bits
    let e = ilog2(x);
    let w = (bits + GUARD_BITS) as u64 + (-e).max(0) as u64;
    let nd = x.numer() * x.denom();
    let root = (nd << (2 * w)).sqrt();
    Ok(ExactScalar::new(root, x.denom() * pow2_int(w)))
}

fn hp_arcosh(a: &ExactScalar, bits: u32) -> Result<ExactScalar> {
    let one = ExactScalar::one();
    if a < &one {
        return Err(Error::Domain("arcosh argument below 1".into()));
    }
    let inner = a * a - &one;
    let s = hp_sqrt(&inner, bits + 16)?;
    hp_log(&(a + s), bits + 16)
}

/// Sign of an exact value as `-1`, `0` or `1`.
pub fn signum(x: &ExactScalar) -> i32 {
    match x.numer().sign() {
        Sign::Minus => -1,
        Sign::NoSign => 0,
        Sign::Plus => 1,
    }
}
