//! Optimizer updates against binary64 recurrences and an exact oracle.

use mcfloat::mct::McTensor;
use mcfloat::optim::{McAdam, McSgd, Optimizer};
use mcfloat::oracle::{exact, exact_sum, to_f64};
use mcfloat::precision::pow2;
use mcfloat::{Precision, Tensor};

fn param(vals: &[f64], nc: usize, p: Precision) -> McTensor {
    mcfloat::mct::from_float(&Tensor::from_vec(vals.to_vec()), nc, p).unwrap()
}

fn step(opt: &mut impl Optimizer, x: &mut McTensor, g: &[f64]) {
    x.zero_grad();
    x.accumulate_grad(&Tensor::from_vec(g.to_vec())).unwrap();
    opt.step(vec![("w".into(), x)]).unwrap();
}

#[test]
fn thousand_tiny_updates_are_retained_with_two_components() {
    let p = Precision::B16;
    let tiny = pow2(-20);
    let truth = exact(1.0) - exact(1000.0) * exact(tiny);
    for nc in [1, 2] {
        let mut x = param(&[1.0], nc, p);
        let mut opt = McSgd::new(1.0, 0.0);
        for _ in 0..1000 {
            step(&mut opt, &mut x, &[tiny]);
        }
        let got = exact_sum(x.element(0));
        if nc == 1 {
            assert_eq!(x.data(), &[1.0]);
        } else {
            assert!(to_f64(&(got - truth.clone())).abs() <= tiny);
        }
    }
}

#[test]
fn sgd_momentum_follows_the_binary64_recurrence() {
    let (lr, mu) = (0.05, 0.9);
    let grads = [[0.3, -1.2], [0.1, 0.4], [-0.7, 0.2], [0.25, 0.25], [1.5, -0.5]];
    let mut x = param(&[1.0, -2.0], 1, Precision::B64);
    let mut opt = McSgd::new(lr, mu);
    let (mut w, mut buf) = ([1.0f64, -2.0], [0.0f64; 2]);
    for (t, g) in grads.iter().enumerate() {
        step(&mut opt, &mut x, g);
        for i in 0..2 {
            buf[i] = if t == 0 { g[i] } else { mu * buf[i] + g[i] };
            w[i] += -(lr * buf[i]);
        }
    }
    assert_eq!(x.data(), &w);
    assert_eq!(opt.momentum_buffer("w").unwrap().data(), &buf);
}

#[test]
fn adam_follows_the_binary64_reference() {
    let (lr, b1, b2, eps) = (0.01, 0.9, 0.999, 1e-8);
    let grads = [[0.3, -1.2], [0.1, 0.4], [-0.7, 0.2], [0.25, 0.0]];
    let mut x = param(&[0.5, 0.5], 1, Precision::B64);
    let mut opt = McAdam::new(lr);
    let (mut w, mut m, mut v) = ([0.5f64; 2], [0.0f64; 2], [0.0f64; 2]);
    for (t, g) in grads.iter().enumerate() {
        step(&mut opt, &mut x, g);
        let t = t as i32 + 1;
        for i in 0..2 {
            m[i] = b1 * m[i] + (1.0 - b1) * g[i];
            v[i] = b2 * v[i] + (1.0 - b2) * (g[i] * g[i]);
            let mh = m[i] / (1.0 - b1.powi(t));
            let vh = v[i] / (1.0 - b2.powi(t));
            w[i] += -(lr * mh) / (vh.sqrt() + eps);
        }
    }
    assert_eq!(opt.steps(), 4);
    for i in 0..2 {
        assert!((x.data()[i] - w[i]).abs() <= 1e-15, "{} vs {}", x.data()[i], w[i]);
    }
}

#[test]
fn mc_momentum_buffer_stays_within_half_an_ulp() {
    let p = Precision::B16;
    let g = 1.0 + pow2(-9);
    // coefficients are rounded to the working format before use
    let mu = p.round(0.9);
    let mut reference = 0.0f64;
    let mut errs = Vec::new();
    for mc_state in [false, true] {
        let mut x = param(&[1.0], 2, p);
        let mut opt = McSgd::new(pow2(-12), 0.9).with_mc_state(mc_state);
        reference = 0.0;
        for t in 0..50 {
            step(&mut opt, &mut x, &[g]);
            reference = if t == 0 { g } else { mu * reference + g };
        }
        errs.push((opt.momentum_buffer("w").unwrap().data()[0] - reference).abs());
    }
    // the buffer reads back rounded to binary16, so half an ulp is the best
    // possible; the plain buffer drifts by several
    let ulp = p.ulp(reference);
    assert!(reference > 9.0);
    assert!(errs[1] <= ulp / 2.0, "mc buffer off by {}", errs[1]);
    assert!(errs[0] > 2.0 * ulp, "plain buffer off by only {}", errs[0]);
}
