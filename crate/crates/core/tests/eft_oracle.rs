//! Error-free transformations checked against exact rationals.

use mcfloat::eft::{self, scalar};
use mcfloat::oracle::exact;
use mcfloat::precision::{pow2, Double, Format, Half, Single};
use mcfloat::Precision;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Random float of `p` with exponent in `[lo, hi]`, random sign and a
/// uniformly random significand.
fn random_float(p: Precision, lo: i32, hi: i32, rng: &mut impl Rng) -> f64 {
    let bits = p.significand_bits();
    let mant = rng.gen_range((1u64 << (bits - 1))..(1u64 << bits)) as f64;
    let e = rng.gen_range(lo..=hi);
    let v = mant * pow2(e - (bits as i32 - 1));
    let v = if rng.gen_bool(0.5) { -v } else { v };
    assert_eq!(p.round(v), v);
    v
}

fn exponent_range(p: Precision) -> (i32, i32) {
    match p {
        Precision::B16 => (-6, 6),
        Precision::B32 => (-60, 60),
        Precision::B64 => (-500, 500),
    }
}

/// Products whose residual would fall below the subnormal range (documented
/// as lost) or whose rounded value overflows are outside the exact domain.
fn product_in_range(p: Precision, a: f64, b: f64) -> bool {
    let m = (a * b).abs();
    m >= p.min_normal() * pow2(p.significand_bits() as i32) && p.round(m).is_finite()
}

fn check_exactness<F: Format>(samples: usize, seed: u64) -> (usize, usize) {
    let p = F::PRECISION;
    let (lo, hi) = exponent_range(p);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut checked = 0;
    let mut excluded = 0;
    while checked < samples {
        let a = random_float(p, lo, hi, &mut rng);
        // half of the pairs share the exponent scale so cancellation is common
        let b = if rng.gen_bool(0.5) {
            random_float(p, lo, hi, &mut rng)
        } else {
            let e = rng.gen_range(-3..=3);
            p.round(a * (1.0 + rng.gen_range(-0.5..0.5)) * pow2(e))
        };
        let (s, e) = eft::two_sum::<F>(a, b);
        assert_eq!(exact(s) + exact(e), exact(a) + exact(b), "two_sum({a:e}, {b:e})");
        assert_eq!(s, p.round(a + b));
        assert!(e.abs() <= p.ulp(s) / 2.0);

        if !product_in_range(p, a, b) {
            excluded += 1;
            continue;
        }
        for (pp, ee) in [eft::two_prod::<F>(a, b), eft::two_prod_fma::<F>(a, b)] {
            assert_eq!(exact(pp) + exact(ee), exact(a) * exact(b), "two_prod({a:e}, {b:e})");
        }
        checked += 1;
    }
    (checked, excluded)
}

#[test]
fn exactness_over_random_pairs() {
    for (k, p) in Precision::ALL.into_iter().enumerate() {
        let (checked, excluded) = match p {
            Precision::B16 => check_exactness::<Half>(100_000, k as u64),
            Precision::B32 => check_exactness::<Single>(100_000, k as u64),
            Precision::B64 => check_exactness::<Double>(100_000, k as u64),
        };
        assert_eq!(checked, 100_000);
        assert!(excluded < checked, "{p}: {excluded} products outside the exact domain");
    }
}

#[test]
fn fma_and_split_products_agree_bitwise() {
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    for _ in 0..100_000 {
        let a = random_float(Precision::B64, -500, 500, &mut rng);
        let b = random_float(Precision::B64, -500, 500, &mut rng);
        let x = eft::two_prod::<Double>(a, b);
        let y = eft::two_prod_fma::<Double>(a, b);
        assert_eq!((x.0.to_bits(), x.1.to_bits()), (y.0.to_bits(), y.1.to_bits()));
    }
    for p in [Precision::B16, Precision::B32] {
        let (lo, hi) = exponent_range(p);
        for _ in 0..20_000 {
            let a = random_float(p, lo, hi, &mut rng);
            let b = random_float(p, lo, hi, &mut rng);
            if !product_in_range(p, a, b) {
                continue;
            }
            assert_eq!(scalar::two_prod(p, a, b), scalar::two_prod_fma(p, a, b));
        }
    }
}

#[test]
fn two_sum_examples_against_oracle() {
    let (s, e) = scalar::two_sum(Precision::B32, 1.0, pow2(-30));
    assert_eq!((s, e), (1.0, pow2(-30)));
    assert_eq!(exact(s) + exact(e), exact(1.0) + exact(pow2(-30)));
    assert_eq!(scalar::two_sum(Precision::B16, 1.0, 0.0), (1.0, 0.0));
}

#[test]
fn split_examples_against_oracle() {
    let a = 1.0 + pow2(-23);
    let (hi, lo) = scalar::split(Precision::B32, a);
    assert_eq!((hi, lo), (1.0, pow2(-23)));
    assert_eq!(exact(hi) + exact(lo), exact(a));
    let pi = std::f64::consts::PI;
    let (hi, lo) = scalar::split(Precision::B64, pi);
    assert_eq!(exact(hi) + exact(lo), exact(pi));
}

/// Number of significant bits between the leading and trailing set bits.
fn width(x: f64) -> u32 {
    if x == 0.0 {
        return 0;
    }
    let m = (x.to_bits() & ((1u64 << 52) - 1)) | (1u64 << 52);
    53 - m.trailing_zeros()
}

#[test]
fn split_halves_fit_and_multiply_exactly() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for p in Precision::ALL {
        let bits = p.significand_bits();
        let half = bits.div_ceil(2);
        let (lo_e, hi_e) = exponent_range(p);
        for _ in 0..20_000 {
            let a = random_float(p, lo_e, hi_e, &mut rng);
            let (hi, lo) = scalar::split(p, a);
            assert_eq!(exact(hi) + exact(lo), exact(a));
            assert!(width(hi) <= bits - half, "{p} hi {hi:e} of {a:e}");
            assert!(width(lo) <= half, "{p} lo {lo:e} of {a:e}");
            let b = random_float(p, lo_e, hi_e, &mut rng);
            let (bh, bl) = scalar::split(p, b);
            for (x, y) in [(hi, bh), (hi, bl), (lo, bh), (lo, bl)] {
                let prod = x * y;
                if prod.abs() >= p.min_normal() {
                    assert_eq!(p.round(prod), prod, "{p}: {x:e} * {y:e} inexact");
                }
            }
        }
    }
}

#[test]
fn split_near_the_format_maximum() {
    for p in Precision::ALL {
        let big = p.max_finite();
        let (hi, lo) = scalar::split(p, big);
        assert_eq!(exact(hi) + exact(lo), exact(big));
        let (pp, e) = scalar::two_prod(p, big, 0.5);
        assert_eq!(exact(pp) + exact(e), exact(big) * exact(0.5));
    }
}

#[test]
fn residual_below_subnormals_is_lost() {
    // 2^-13 * (1 + 2^-10) squared in binary16: the residual 2^-46 cannot be stored
    let a = pow2(-13) * (1.0 + pow2(-10));
    let (p, e) = scalar::two_prod(Precision::B16, a, a);
    assert_eq!(e, 0.0);
    assert_ne!(exact(p) + exact(e), exact(a) * exact(a));
}

#[test]
fn non_finite_inputs_propagate() {
    let (s, _) = scalar::two_sum(Precision::B32, f64::INFINITY, 1.0);
    assert_eq!(s, f64::INFINITY);
    let (p, _) = scalar::two_prod(Precision::B16, f64::NAN, 1.0);
    assert!(p.is_nan());
    let (s, _) = scalar::two_sum(Precision::B16, 65504.0, 65504.0);
    assert_eq!(s, f64::INFINITY);
}

#[test]
fn slices_agree_with_scalars() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    for p in Precision::ALL {
        let (lo, hi) = exponent_range(p);
        let a: Vec<f64> = (0..1000).map(|_| random_float(p, lo, hi, &mut rng)).collect();
        let b: Vec<f64> = (0..1000).map(|_| random_float(p, lo, hi, &mut rng)).collect();
        let (s, e) = eft::two_sum_slices(p, &a, &b);
        let (q, f) = eft::two_prod_slices(p, &a, &b);
        let (h, l) = eft::split_slice(p, &a);
        for i in 0..a.len() {
            assert_eq!((s[i], e[i]), scalar::two_sum(p, a[i], b[i]));
            assert_eq!((q[i], f[i]), scalar::two_prod_fma(p, a[i], b[i]));
            assert_eq!((h[i], l[i]), scalar::split(p, a[i]));
        }
    }
}
