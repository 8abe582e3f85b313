//! Per-element MCF kernels.
//!
//! Each kernel works on the components of a single element, given as slices
//! ordered from the largest component to the smallest, and writes the result
//! components into `out`. The output length selects the result's component
//! count. All arithmetic goes through the error-free transformations and is
//! rounded to the format `F`.

use smallvec::{smallvec, SmallVec};

use crate::eft::{two_prod_auto, two_sum};
use crate::precision::{pow2, Format, Precision};

pub(crate) type Terms = SmallVec<[f64; 24]>;

/// Stable sort by non-increasing magnitude.
fn sort_by_magnitude(h: &mut [f64]) {
    for i in 1..h.len() {
        let v = h[i];
        let mut j = i;
        while j > 0 && h[j - 1].abs() < v.abs() {
            h[j] = h[j - 1];
            j -= 1;
        }
        h[j] = v;
    }
}

/// Whether consecutive nonzero components satisfy `|b[i+1]| <= ulp(b[i])`.
fn nonoverlapping<F: Format>(b: &[f64]) -> bool {
    b.windows(2)
        .all(|w| w[1] == 0.0 || !w[0].is_finite() || w[1].abs() <= F::PRECISION.ulp(w[0]))
}

/// One VecSum sweep followed by a top-down extraction. Returns the number of
/// extracted components, written to the front of `b`. The value is preserved
/// exactly.
fn sweep<F: Format>(h: &mut [f64], b: &mut [f64]) -> usize {
    let n = h.len();
    sort_by_magnitude(h);
    let mut s = h[n - 1];
    for i in (0..n - 1).rev() {
        let (sum, err) = two_sum::<F>(h[i], s);
        s = sum;
        h[i + 1] = err;
    }
    h[0] = s;
    b.fill(0.0);
    let mut k = 0;
    let mut s = h[0];
    for &ti in &h[1..] {
        let (sum, err) = two_sum::<F>(s, ti);
        if err != 0.0 {
            b[k] = sum;
            k += 1;
            s = err;
        } else {
            s = sum;
        }
    }
    b[k] = s;
    k + 1
}

/// Priest-style renormalization of a raw expansion into `out.len()` components.
///
/// Each sweep orders the terms by magnitude, compresses them bottom-up with a
/// two-sum chain and extracts components top-down; both steps preserve the
/// value exactly. Sweeps repeat (at most four times) until consecutive
/// components no longer overlap. When more components come out than fit, the
/// leading ones are kept and the last slot receives the rounded sum of the
/// remainder.
pub fn renormalize<F: Format>(h: &mut [f64], out: &mut [f64]) {
    out.fill(0.0);
    let n = h.len();
    let r = out.len();
    if n == 0 || r == 0 {
        return;
    }
    let mut b: Terms = smallvec![0.0; n];
    let mut len = sweep::<F>(h, &mut b);
    for _ in 0..3 {
        if nonoverlapping::<F>(&b[..len]) {
            break;
        }
        h[..len].copy_from_slice(&b[..len]);
        len = sweep::<F>(&mut h[..len], &mut b);
    }
    let kept = len.min(r);
    out[..kept].copy_from_slice(&b[..kept]);
    if len > r {
        out[r - 1] = approx::<F>(&b[r - 1..len]);
    }
}

/// Compacts nonzero terms to the front, keeping their relative order, then
/// truncates or zero-pads to `out.len()`.
pub fn simple_renorm(h: &[f64], out: &mut [f64]) {
    out.fill(0.0);
    let mut k = 0;
    for &v in h {
        if v != 0.0 {
            if k == out.len() {
                break;
            }
            out[k] = v;
            k += 1;
        }
    }
}

/// Adds a working-precision value to an expansion (grow expansion followed by
/// zero compaction).
pub fn grow_expn<F: Format>(x: &[f64], v: f64, out: &mut [f64]) {
    let nc = x.len();
    let mut h: Terms = smallvec![0.0; nc + 1];
    let mut q = v;
    for k in (1..=nc).rev() {
        let (sum, err) = two_sum::<F>(x[k - 1], q);
        q = sum;
        h[k] = err;
    }
    h[0] = q;
    simple_renorm(&h, out);
}

/// Multiplies an expansion by a working-precision value. `out` may hold
/// `nc` components or `nc + 1` for the expanded result.
pub fn scaling_n<F: Format>(x: &[f64], v: f64, out: &mut [f64]) {
    if x.len() == 1 && out.len() == 1 {
        // a product error below the subnormal quantum is itself rounded, and
        // folding it back in would round twice
        out[0] = F::round(x[0] * v);
        return;
    }
    let mut terms: Terms = SmallVec::with_capacity(2 * x.len());
    for &xi in x {
        let (p, e) = two_prod_auto::<F>(xi, v);
        terms.push(p);
        terms.push(e);
    }
    renormalize::<F>(&mut terms, out);
}

/// Sum of two expansions.
pub fn add_mcn<F: Format>(x: &[f64], y: &[f64], out: &mut [f64]) {
    let mut terms: Terms = SmallVec::with_capacity(x.len() + y.len());
    terms.extend_from_slice(x);
    terms.extend_from_slice(y);
    renormalize::<F>(&mut terms, out);
}

/// Long division: one quotient digit per step against the leading divisor
/// component, with the residual carried in MCF with one spare component. A
/// single guard digit is used when more than one component is requested.
pub fn div_mcn<F: Format>(x: &[f64], y: &[f64], out: &mut [f64]) {
    let nc = out.len();
    let digits = if nc == 1 { 1 } else { nc + 1 };
    let mut q: Terms = SmallVec::with_capacity(digits);
    let mut r: Terms = SmallVec::from_slice(x);
    r.resize(x.len().max(nc + 1), 0.0);
    let mut prod: Terms = smallvec![0.0; y.len() + 1];
    for i in 0..digits {
        let qi = F::round(r[0] / y[0]);
        q.push(qi);
        if i + 1 == digits {
            break;
        }
        scaling_n::<F>(y, qi, &mut prod);
        let mut terms: Terms = SmallVec::with_capacity(r.len() + prod.len());
        terms.extend_from_slice(&r);
        terms.extend(prod.iter().map(|&p| -p));
        let mut next: Terms = smallvec![0.0; r.len()];
        renormalize::<F>(&mut terms, &mut next);
        r = next;
    }
    renormalize::<F>(&mut q, out);
}

/// Product of two expansions from their pairwise component products: exact
/// two-products for index pairs `i + j < nc`, plain products for the guard
/// diagonal `i + j == nc`.
pub fn mul_mcn_slow<F: Format>(x: &[f64], y: &[f64], out: &mut [f64]) {
    let nc = out.len();
    if nc == 1 && x.len() == 1 && y.len() == 1 {
        out[0] = F::round(x[0] * y[0]);
        return;
    }
    let mut terms: Terms = SmallVec::new();
    for (i, &xi) in x.iter().enumerate() {
        for (j, &yj) in y.iter().enumerate() {
            if i + j < nc {
                let (p, e) = two_prod_auto::<F>(xi, yj);
                terms.push(p);
                terms.push(e);
            } else if i + j == nc {
                terms.push(F::round(xi * yj));
            }
        }
    }
    renormalize::<F>(&mut terms, out);
}

/// Square of an expansion; the symmetric cross terms are formed once and
/// doubled exactly.
pub fn square_mcn<F: Format>(x: &[f64], out: &mut [f64]) {
    let nc = out.len();
    if nc == 1 && x.len() == 1 {
        out[0] = F::round(x[0] * x[0]);
        return;
    }
    let mut terms: Terms = SmallVec::new();
    for i in 0..x.len() {
        for j in i..x.len() {
            let twice = if i == j { 1.0 } else { 2.0 };
            if i + j < nc {
                let (p, e) = two_prod_auto::<F>(x[i], x[j]);
                terms.push(F::round(twice * p));
                terms.push(F::round(twice * e));
            } else if i + j == nc {
                terms.push(F::round(twice * F::round(x[i] * x[j])));
            }
        }
    }
    renormalize::<F>(&mut terms, out);
}

fn is_zero(x: &[f64]) -> bool {
    x.iter().all(|&c| c == 0.0)
}

/// Product through the reciprocal of the second operand, `x / (1 / y)`.
///
/// Falls back to [`mul_mcn_slow`] where the reciprocal route is undefined or
/// loses its low components: a zero divisor returns zero, a single component
/// is an ordinary rounded multiply, and reciprocals that overflow or land in
/// the subnormal range use the product-of-components scheme.
pub fn mul_mcn<F: Format>(x: &[f64], y: &[f64], out: &mut [f64]) {
    let nc = out.len();
    if is_zero(y) {
        out.fill(0.0);
        return;
    }
    if nc == 1 {
        out.fill(0.0);
        out[0] = F::round(x[0] * y[0]);
        return;
    }
    let mut one: Terms = smallvec![0.0; nc];
    one[0] = 1.0;
    let mut recip: Terms = smallvec![0.0; nc + 1];
    div_mcn::<F>(&one, y, &mut recip);
    let p = F::PRECISION;
    let floor = p.min_normal() * pow2(p.significand_bits() as i32);
    if !recip[0].is_finite() || recip[0].abs() < floor || recip[0].abs() > p.max_finite() / 4.0 {
        mul_mcn_slow::<F>(x, y, out);
    } else {
        div_mcn::<F>(x, &recip, out);
    }
}

/// Evaluated sum, accumulated from the smallest component up.
pub fn approx<F: Format>(x: &[f64]) -> f64 {
    let mut s = 0.0;
    for &c in x.iter().rev() {
        s = F::round(s + c);
    }
    s
}

/// Natural logarithm of two as a binary64 expansion (about 212 bits).
const LN2: [f64; 4] = [
    6.931471805599452862e-01,
    2.319046813846299558e-17,
    5.707708438416212066e-34,
    -3.582432210601811423e-50,
];

/// `ln 2` re-expressed in the format `F` with `n` components.
pub(crate) fn ln2_expansion<F: Format>(n: usize) -> Terms {
    let mut pieces: Terms = SmallVec::new();
    for &c in &LN2 {
        let mut v = c;
        while v != 0.0 {
            let p = F::round(v);
            if p == 0.0 {
                break;
            }
            pieces.push(p);
            v -= p;
        }
    }
    let mut out: Terms = smallvec![0.0; n];
    renormalize::<F>(&mut pieces, &mut out);
    out
}

/// Multiplies each component by `2^k`, rounding into `F` only where a
/// component leaves the normal range.
fn ldexp<F: Format>(x: &mut [f64], k: i32) {
    let k1 = k / 2;
    let k2 = k - k1;
    for c in x.iter_mut() {
        *c = F::round(*c * pow2(k1) * pow2(k2));
    }
}

/// Exponential of an expansion.
///
/// The argument is reduced by a multiple of `ln 2` held in MCF, scaled down
/// by `2^-8`, and `expm1` of the reduced value is summed as a Taylor series
/// in MCF. Eight doubling steps `E <- 2E + E^2` undo the scaling without
/// amplifying relative error, and the power of two is reapplied exactly.
/// Binary16 skips the scaling: its subnormal floor would swallow the low
/// components of the series.
/// `ln2` must hold at least `out.len() + 1` components.
pub fn exp_mcn<F: Format>(x: &[f64], ln2: &[f64], out: &mut [f64]) {
    let halvings: i32 = if F::PRECISION == Precision::B16 { 0 } else { 8 };
    let nc = out.len();
    out.fill(0.0);
    let p = F::PRECISION;
    let a = approx::<F>(x);
    if a.is_nan() {
        out[0] = f64::NAN;
        return;
    }
    if a > p.max_finite().ln() + 1.0 {
        out[0] = f64::INFINITY;
        return;
    }
    if a < p.min_positive().ln() - 1.0 {
        return;
    }
    if nc == 1 {
        out[0] = F::round(x[0].exp());
        return;
    }
    let k = (a / std::f64::consts::LN_2).round();
    let mut kln2: Terms = smallvec![0.0; nc + 1];
    scaling_n::<F>(ln2, -k, &mut kln2);
    let mut r: Terms = smallvec![0.0; nc];
    add_mcn::<F>(x, &kln2, &mut r);
    ldexp::<F>(&mut r, -halvings);

    // expm1(r) = r + r^2/2! + r^3/3! + ...
    let bits = ((nc as u32 * p.significand_bits() + 4) as i32).min(1000);
    let mut term: Terms = r.clone();
    let mut sum: Terms = r.clone();
    let mut scratch: Terms = smallvec![0.0; nc];
    let mut divisor: Terms = smallvec![0.0; nc];
    for n in 2..200 {
        if term[0] == 0.0 || term[0].abs() < sum[0].abs() * pow2(-bits) {
            break;
        }
        mul_mcn_slow::<F>(&term, &r, &mut scratch);
        divisor[0] = n as f64;
        div_mcn::<F>(&scratch, &divisor, &mut term);
        add_mcn::<F>(&sum, &term, &mut scratch);
        sum.copy_from_slice(&scratch);
    }
    let mut sq: Terms = smallvec![0.0; nc];
    for _ in 0..halvings {
        square_mcn::<F>(&sum, &mut sq);
        for c in sum.iter_mut() {
            *c = F::round(2.0 * *c);
        }
        add_mcn::<F>(&sum, &sq, &mut scratch);
        sum.copy_from_slice(&scratch);
    }
    let mut one: Terms = smallvec![0.0; nc];
    one[0] = 1.0;
    add_mcn::<F>(&sum, &one, out);
    ldexp::<F>(out, k as i32);
}
