//! Layers: single-component parity, softmax normalization and checkpoints.

use mcfloat::autodiff::Tape;
use mcfloat::linalg;
use mcfloat::mct;
use mcfloat::nn::{self, load_checkpoint, save_checkpoint, Activation, MCLinear, MCSequential, Module};
use mcfloat::{Precision, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random(shape: Vec<usize>, p: Precision, rng: &mut impl Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| p.round(rng.gen_range(-2.0..2.0))).collect()).unwrap()
}

#[test]
fn single_component_linear_is_plain_arithmetic() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for p in Precision::ALL {
        for _ in 0..20 {
            let (n, k, m) = (rng.gen_range(1..6), rng.gen_range(1..9), rng.gen_range(1..5));
            let lin = MCLinear::new(k, m, true, 1, p, &mut rng).unwrap();
            let x = random(vec![n, k], p, &mut rng);
            let tape = Tape::new(p);
            let y = lin.forward(&tape, tape.leaf(&x)).unwrap();
            let w = lin.weight.approx();
            let b = lin.bias.as_ref().unwrap().approx();
            let prod = linalg::plain_matmul(p, &x, &w.transpose().unwrap()).unwrap();
            let want: Vec<u64> = prod
                .data()
                .iter()
                .enumerate()
                .map(|(i, &v)| p.round(v + b.data()[i % m]).to_bits())
                .collect();
            let got: Vec<u64> = tape.value(y).unwrap().data().iter().map(|v| v.to_bits()).collect();
            assert_eq!(got, want);
        }
    }
}

#[test]
fn softmax_rows_sum_to_one() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for (p, nc) in [(Precision::B32, 2), (Precision::B16, 2), (Precision::B64, 1)] {
        let x = mct::from_float(&random(vec![4, 6], p, &mut rng), nc, p).unwrap();
        let tape = Tape::new(p);
        let s = nn::mc_softmax(&tape, tape.mc_param(&x).unwrap()).unwrap();
        let m = tape.mc_value(s).unwrap().unwrap();
        let exact = mcfloat::oracle::value_of(&m);
        for i in 0..4 {
            let row: f64 = exact[i * 6..(i + 1) * 6].iter().map(mcfloat::oracle::to_f64).sum();
            assert!((row - 1.0).abs() <= 8.0 * p.unit_roundoff(), "{p} row {i}: {row}");
        }
    }
}

#[test]
fn layer_widths_must_chain() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let a = MCLinear::new(3, 4, true, 2, Precision::B32, &mut rng).unwrap();
    let b = MCLinear::new(5, 1, true, 2, Precision::B32, &mut rng).unwrap();
    let err = MCSequential::new(vec![nn::Layer::Linear(a), nn::Layer::Linear(b)]).unwrap_err();
    assert!(err.to_string().contains("5 inputs"));
}

#[test]
fn checkpoint_round_trip_is_bitwise() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let model = MCSequential::mlp(&[3, 5, 2], Activation::Tanh, 3, Precision::B16, &mut rng).unwrap();
    let dir = tempfile::tempdir().unwrap();
    save_checkpoint(&model, dir.path()).unwrap();
    let back = load_checkpoint(dir.path()).unwrap();
    let bits = |m: &MCSequential| {
        m.named_parameters()
            .into_iter()
            .map(|(n, p)| (n, p.nc(), p.precision(), p.data().iter().map(|c| c.to_bits()).collect::<Vec<_>>()))
            .collect::<Vec<_>>()
    };
    assert_eq!(bits(&model), bits(&back));
    let x = random(vec![2, 3], Precision::B16, &mut rng);
    let run = |m: &MCSequential| {
        let tape = Tape::new(Precision::B16);
        tape.value(m.forward(&tape, tape.leaf(&x)).unwrap()).unwrap()
    };
    assert_eq!(run(&model), run(&back));
}

#[test]
fn missing_checkpoint_is_an_error() {
    let dir = tempfile::tempdir().unwrap();
    assert!(load_checkpoint(dir.path()).is_err());
}
