//! Finite-difference gradient cases for the tape, and the home of the
//! acceptance suite (`tests/acceptance.rs`).
//!
//! Each case returns the largest deviation between the tape gradient and a
//! central difference in binary64, relative to the largest difference
//! quotient.

use mcfloat::autodiff::{Tape, Var};
use mcfloat::hyperbolic;
use mcfloat::mct::{self, McTensor};
use mcfloat::nn::{self, MCEmbedding, MCLinear};
use mcfloat::{Precision, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const P: Precision = Precision::B64;
const STEP: f64 = 1e-6;

fn mc(shape: Vec<usize>, vals: &[f64], nc: usize) -> McTensor {
    mct::from_float(&Tensor::new(shape, vals.to_vec()).unwrap(), nc, P).unwrap()
}

fn random(n: usize, lo: f64, hi: f64, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| rng.gen_range(lo..hi)).collect()
}

pub fn fd_error(at: &[f64], grad: &[f64], f: impl Fn(&[f64]) -> f64) -> f64 {
    assert_eq!(at.len(), grad.len());
    let mut fd = Vec::with_capacity(at.len());
    for i in 0..at.len() {
        let mut x = at.to_vec();
        x[i] = at[i] + STEP;
        let up = f(&x);
        x[i] = at[i] - STEP;
        let down = f(&x);
        fd.push((up - down) / (2.0 * STEP));
    }
    let scale = fd.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1e-12);
    grad.iter().zip(&fd).map(|(g, d)| (g - d).abs()).fold(0.0, f64::max) / scale
}

/// Errors for the weight, bias and input of an MCLinear layer under MSE.
pub fn linear_layer() -> [f64; 3] {
    let (n, k, m) = (5, 4, 3);
    let x0 = random(n * k, -1.0, 1.0, 1);
    let w0 = random(m * k, -1.0, 1.0, 2);
    let b0 = random(m, -1.0, 1.0, 3);
    let target = Tensor::new(vec![n, m], random(n * m, -1.0, 1.0, 4)).unwrap();
    let loss = |x: &[f64], w: &[f64], b: &[f64]| {
        let lin = MCLinear::from_parameters(mc(vec![m, k], w, 2), Some(mc(vec![m], b, 2))).unwrap();
        let tape = Tape::new(P);
        let xv = tape.leaf(&Tensor::new(vec![n, k], x.to_vec()).unwrap());
        let out = lin.forward(&tape, xv).unwrap();
        let l = nn::mse(&tape, out, &target).unwrap();
        let value = tape.value(l).unwrap().item().unwrap();
        let g = tape.backward(l).unwrap();
        let gw = g.param(&lin.weight).unwrap().data().to_vec();
        let gb = g.param(lin.bias.as_ref().unwrap()).unwrap().data().to_vec();
        (value, gw, gb, g.wrt(xv).unwrap().data().to_vec())
    };
    let (_, gw, gb, gx) = loss(&x0, &w0, &b0);
    [
        fd_error(&w0, &gw, |w| loss(&x0, w, &b0).0),
        fd_error(&b0, &gb, |b| loss(&x0, &w0, b).0),
        fd_error(&x0, &gx, |x| loss(x, &w0, &b0).0),
    ]
}

/// Embedding lookup with repeated indices. Also returns whether the row that
/// is never looked up received an exactly zero gradient.
pub fn embedding() -> (f64, bool) {
    let (rows, dim) = (4, 3);
    let idx = [0, 2, 2, 1, 0];
    let t0 = random(rows * dim, -1.0, 1.0, 5);
    let target = Tensor::new(vec![idx.len(), dim], random(idx.len() * dim, -1.0, 1.0, 6)).unwrap();
    let loss = |t: &[f64]| {
        let emb = MCEmbedding::from_table(mc(vec![rows, dim], t, 2)).unwrap();
        let tape = Tape::new(P);
        let out = emb.forward(&tape, &idx).unwrap();
        let l = nn::mse(&tape, out, &target).unwrap();
        let g = tape.backward(l).unwrap();
        (tape.value(l).unwrap().item().unwrap(), g.param(&emb.table).unwrap().data().to_vec())
    };
    let (_, g) = loss(&t0);
    let unused_zero = g[3 * dim..].iter().all(|&v| v == 0.0);
    (fd_error(&t0, &g, |t| loss(t).0), unused_zero)
}

pub fn softmax() -> f64 {
    let (r, c) = (3, 4);
    let x0 = random(r * c, -2.0, 2.0, 7);
    let weights = Tensor::new(vec![r, c], random(r * c, -1.0, 1.0, 8)).unwrap();
    let loss = |x: &[f64]| {
        let xm = mc(vec![r, c], x, 2);
        let tape = Tape::new(P);
        let xv = tape.mc_param(&xm).unwrap();
        let s = nn::mc_softmax(&tape, xv).unwrap();
        let wv = tape.leaf(&weights);
        let l = tape.sum(tape.mul(s, wv).unwrap()).unwrap();
        let g = tape.backward(l).unwrap();
        (tape.value(l).unwrap().item().unwrap(), g.param(&xm).unwrap().data().to_vec())
    };
    let (_, g) = loss(&x0);
    fd_error(&x0, &g, |x| loss(x).0)
}

/// Value and gradient of a loss built from one standard leaf.
fn leaf_loss(shape: Vec<usize>, at: &[f64], build: impl Fn(&Tape, Var) -> Var) -> (f64, Vec<f64>) {
    let tape = Tape::new(P);
    let x = tape.leaf(&Tensor::new(shape, at.to_vec()).unwrap());
    let l = build(&tape, x);
    let g = tape.backward(l).unwrap();
    (tape.value(l).unwrap().item().unwrap(), g.wrt(x).unwrap().data().to_vec())
}

fn leaf_error(shape: Vec<usize>, at: &[f64], build: impl Fn(&Tape, Var) -> Var + Copy) -> f64 {
    let (_, g) = leaf_loss(shape.clone(), at, build);
    fd_error(at, &g, |x| leaf_loss(shape.clone(), x, build).0)
}

pub fn mse() -> f64 {
    let target = Tensor::new(vec![6, 1], random(6, -1.0, 1.0, 9)).unwrap();
    let x0 = random(6, -1.0, 1.0, 10);
    leaf_error(vec![6, 1], &x0, |t, x| nn::mse(t, x, &target).unwrap())
}

/// Binary cross-entropy on probabilities, then composed with a sigmoid.
pub fn bce() -> [f64; 2] {
    let target = Tensor::new(vec![6, 1], vec![0.0, 1.0, 1.0, 0.0, 1.0, 0.0]).unwrap();
    let p0 = random(6, 0.1, 0.9, 12);
    let x0 = random(6, -3.0, 3.0, 11);
    [
        leaf_error(vec![6, 1], &p0, |t, x| nn::bce(t, x, &target).unwrap()),
        leaf_error(vec![6, 1], &x0, |t, x| nn::bce(t, t.sigmoid(x).unwrap(), &target).unwrap()),
    ]
}

pub fn cross_entropy() -> f64 {
    let labels = [2, 0, 1, 2];
    let x0 = random(12, -2.0, 2.0, 13);
    leaf_error(vec![4, 3], &x0, |t, x| nn::cross_entropy(t, x, &labels).unwrap())
}

pub fn hyperbolic_loss() -> f64 {
    let (rows, dim) = (5, 3);
    let mut t0 = random(rows * dim, -0.5, 0.5, 14);
    for i in 0..rows {
        t0[i * dim + dim - 1] = 0.3 + 0.2 * i as f64;
    }
    let positives = [(0, 1), (2, 3)];
    let negatives = [2, 4, 0, 4];
    let loss = |t: &[f64]| {
        let emb = MCEmbedding::from_table(mc(vec![rows, dim], t, 2)).unwrap();
        let tape = Tape::new(P);
        let l = hyperbolic::reconstruction_loss(&tape, &emb, &positives, &negatives).unwrap();
        let g = tape.backward(l).unwrap();
        (tape.value(l).unwrap().item().unwrap(), g.param(&emb.table).unwrap().data().to_vec())
    };
    let (_, g) = loss(&t0);
    fd_error(&t0, &g, |t| loss(t).0)
}

#[cfg(test)]
mod tests {
    const TOL: f64 = 1e-3;

    #[test]
    fn linear_layer_weight_bias_and_input() {
        for (name, err) in ["weight", "bias", "input"].into_iter().zip(super::linear_layer()) {
            assert!(err < TOL, "{name}: {err}");
        }
    }

    #[test]
    fn embedding_scatters_repeated_rows() {
        let (err, unused_zero) = super::embedding();
        assert!(unused_zero, "row 3 is never looked up");
        assert!(err < TOL, "{err}");
    }

    #[test]
    fn softmax_rows() {
        assert!(super::softmax() < TOL);
    }

    #[test]
    fn mean_squared_error() {
        assert!(super::mse() < TOL);
    }

    #[test]
    fn binary_cross_entropy_through_sigmoid() {
        let [direct, chained] = super::bce();
        assert!(direct < TOL, "{direct}");
        assert!(chained < TOL, "{chained}");
    }

    #[test]
    fn cross_entropy_over_logits() {
        assert!(super::cross_entropy() < TOL);
    }

    #[test]
    fn hyperbolic_reconstruction_loss() {
        assert!(super::hyperbolic_loss() < TOL);
    }
}
