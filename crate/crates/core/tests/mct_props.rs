//! Structural invariants of MC operator outputs on random inputs.

use mcfloat::mct::{self, McTensor};
use mcfloat::oracle::{exact, exact_sum, sample_expansion, to_f64};
use mcfloat::{Precision, Tensor};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn precision() -> impl Strategy<Value = Precision> {
    prop_oneof![Just(Precision::B16), Just(Precision::B32), Just(Precision::B64)]
}

fn magnitude(p: Precision) -> i32 {
    match p {
        Precision::B16 => 1,
        _ => 3,
    }
}

fn random_mc(p: Precision, nc: usize, seed: u64, m: i32) -> McTensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut data = Vec::new();
    for i in 0..4 {
        let mut c = sample_expansion(m, nc, p, &mut rng);
        if i % 2 == 1 {
            c.iter_mut().for_each(|v| *v = -*v);
        }
        data.extend(c);
    }
    McTensor::from_components(vec![4], nc, p, data).unwrap()
}

/// Ordered, trailing zeros only, and `|x_{i+1}| <= ulp(x_i)`.
fn check_normalized(x: &McTensor) -> Result<(), TestCaseError> {
    check_ordered(x, true)
}

/// Ordering and zero placement, optionally with the nonoverlap bound.
fn check_ordered(x: &McTensor, nonoverlap: bool) -> Result<(), TestCaseError> {
    let p = x.precision();
    for i in 0..x.numel() {
        let e = x.element(i);
        if e.iter().any(|c| !c.is_finite()) {
            continue;
        }
        for w in e.windows(2) {
            prop_assert!(w[0] != 0.0 || w[1] == 0.0, "zero before nonzero in {:?}", e);
            if w[1] != 0.0 {
                prop_assert!(w[1].abs() <= w[0].abs(), "unordered {:?}", e);
                prop_assert!(!nonoverlap || w[1].abs() <= p.ulp(w[0]), "overlapping {:?}", e);
            }
        }
        for &c in e {
            prop_assert!(c == 0.0 || c.abs() >= p.min_positive());
            prop_assert_eq!(p.round(c), c);
        }
    }
    Ok(())
}

fn value_gap(x: &McTensor, y_value: &[num_rational::BigRational]) -> Vec<f64> {
    (0..x.numel())
        .map(|i| to_f64(&(exact_sum(x.element(i)) - &y_value[i])).abs())
        .collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn operator_outputs_are_normalized(p in precision(), nc in 1usize..=4, s1: u64, s2: u64) {
        let m = magnitude(p);
        let x = random_mc(p, nc, s1, m);
        let y = random_mc(p, nc, s2, m);
        let v = Tensor::from_vec(mct::approx(&random_mc(p, 1, s2 ^ 1, 0)).into_data());
        check_normalized(&mct::add_mcn(&x, &y).unwrap())?;
        check_normalized(&mct::div_mcn(&x, &y).unwrap())?;
        check_normalized(&mct::mul_mcn(&x, &y).unwrap())?;
        check_normalized(&mct::mul_mcn_slow(&x, &y).unwrap())?;
        check_normalized(&mct::square_mcn(&x))?;
        check_normalized(&mct::scaling_n(&x, &v, false).unwrap())?;
        check_normalized(&mct::scaling_n(&x, &v, true).unwrap())?;
        // grow ends in a zero compaction, not a renormalization
        check_ordered(&mct::grow_expn(&x, &v).unwrap(), false)?;
        let below = Tensor::new(vec![4], (0..4).map(|i| p.round(x.element(i)[nc - 1] * 0.375)).collect()).unwrap();
        check_normalized(&mct::grow_expn(&x, &below).unwrap())?;
        check_normalized(&mct::renormalize(&x, nc).unwrap())?;
        let small = mct::scaling_n(&x, &Tensor::scalar(0.125), false).unwrap();
        check_normalized(&mct::exp_mcn(&small))?;
    }

    #[test]
    fn grow_and_add_conserve_value(p in precision(), nc in 1usize..=4, s1: u64, s2: u64) {
        let m = magnitude(p);
        let x = random_mc(p, nc, s1, m);
        let y = random_mc(p, nc, s2, m);
        let v = mct::approx(&random_mc(p, 1, s1 ^ 7, m));

        let sum = mct::add_mcn(&x, &y).unwrap();
        let truth: Vec<_> = (0..4).map(|i| exact_sum(x.element(i)) + exact_sum(y.element(i))).collect();
        for (i, gap) in value_gap(&sum, &truth).into_iter().enumerate() {
            let last = sum.element(i)[nc - 1];
            prop_assert!(gap <= p.ulp(last), "add gap {gap:e} last {last:e}");
        }

        // Only the final two-sum error h_nc is dropped, which is bounded by
        // half an ulp of x_{nc-1} + v.
        let grown = mct::grow_expn(&x, &v).unwrap();
        let truth: Vec<_> = (0..4).map(|i| exact_sum(x.element(i)) + exact(v.data()[i])).collect();
        for (i, gap) in value_gap(&grown, &truth).into_iter().enumerate() {
            let tail = x.element(i)[nc - 1].abs() + v.data()[i].abs();
            prop_assert!(gap <= p.ulp(tail) / 2.0, "grow gap {gap:e} tail {tail:e}");
        }

        // Updates below the last component's scale are kept to one ulp of it.
        let tiny = Tensor::new(vec![4], (0..4).map(|i| p.round(x.element(i)[nc - 1] * 0.375)).collect()).unwrap();
        let grown = mct::grow_expn(&x, &tiny).unwrap();
        let truth: Vec<_> = (0..4).map(|i| exact_sum(x.element(i)) + exact(tiny.data()[i])).collect();
        for (i, gap) in value_gap(&grown, &truth).into_iter().enumerate() {
            let last = grown.element(i)[nc - 1];
            prop_assert!(gap <= p.ulp(last), "tiny grow gap {gap:e} last {last:e}");
        }
    }

    #[test]
    fn renormalize_is_idempotent(p in precision(), nc in 1usize..=4, s: u64) {
        let x = mct::renormalize(&random_mc(p, nc + 1, s, magnitude(p)), nc).unwrap();
        prop_assert_eq!(mct::renormalize(&x, nc).unwrap(), x);
    }

    #[test]
    fn negate_twice_is_bitwise_identity(p in precision(), nc in 1usize..=4, s: u64) {
        let x = random_mc(p, nc, s, magnitude(p));
        let back = mct::negate(&mct::negate(&x));
        let bits = |t: &McTensor| t.data().iter().map(|c| c.to_bits()).collect::<Vec<_>>();
        prop_assert_eq!(bits(&back), bits(&x));
    }
}
