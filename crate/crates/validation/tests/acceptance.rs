//! Acceptance suite. Every criterion runs in order inside one test so the
//! timing comparisons are not disturbed by concurrent tests; each prints one
//! PASS/FAIL line and the test fails if any of them does.

use std::io::Write;
use std::path::PathBuf;
use std::time::{Duration, Instant};

use half::f16;
use mcfloat::eft::{self, scalar};
use mcfloat::experiments::{self, BenchOp, Command, MagnitudeMode, ProfileOp, RunConfig, RunReport};
use mcfloat::linalg;
use mcfloat::mct::{self, McTensor};
use mcfloat::optim::{McSgd, Optimizer};
use mcfloat::oracle::{exact, exact_sum, to_f64};
use mcfloat::precision::{pow2, Double, Format, Half, Single};
use mcfloat::{data, hyperbolic, Precision, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome { pass, detail: detail.into() }
}

/// Runs one criterion, appends its budget check and prints its line. Lines
/// go straight to stdout so they show even when the harness captures output.
fn criterion(id: u32, name: &str, budget: Option<Duration>, f: impl FnOnce() -> Outcome) -> bool {
    let start = Instant::now();
    let mut o = f();
    let elapsed = start.elapsed();
    if let Some(b) = budget {
        o.pass &= elapsed <= b;
        o.detail = format!("{}; {:.1}s of {}s", o.detail, elapsed.as_secs_f64(), b.as_secs());
    } else {
        o.detail = format!("{}; {:.1}s", o.detail, elapsed.as_secs_f64());
    }
    let line = format!("{} criterion {id:>2} {name}: {}\n", if o.pass { "PASS" } else { "FAIL" }, o.detail);
    let mut out = std::io::stdout().lock();
    out.write_all(line.as_bytes()).unwrap();
    out.flush().unwrap();
    o.pass
}

fn data_file(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../data").join(name)
}

fn run(cfg: &RunConfig) -> RunReport {
    experiments::run(cfg).unwrap()
}

fn metric(r: &RunReport, label: &str, name: &str) -> f64 {
    r.run(label).unwrap_or_else(|| panic!("no run {label}")).metric(name).unwrap()
}

fn final_loss(r: &RunReport, label: &str) -> f64 {
    r.run(label).unwrap_or_else(|| panic!("no run {label}")).final_train_loss
}

// ---------------------------------------------------------------------------
// 1. error-free transformations

/// Finite value of `p` with exponent in `[lo, hi]` and a random significand.
fn random_float(p: Precision, lo: i32, hi: i32, rng: &mut impl Rng) -> f64 {
    let bits = p.significand_bits();
    let mant = rng.gen_range((1u64 << (bits - 1))..(1u64 << bits)) as f64;
    // two scalings so subnormal targets stay within the range of pow2
    let v = p.round(mant * pow2(1 - bits as i32) * pow2(rng.gen_range(lo..=hi)));
    if rng.gen_bool(0.5) {
        -v
    } else {
        v
    }
}

/// Counts pairs whose two_sum or two_prod residual is not exact. Products
/// that overflow, or whose residual would fall below the subnormal range,
/// are outside the exact domain and skipped.
fn eft_failures<F: Format>(pairs: usize, seed: u64) -> (usize, usize) {
    let p = F::PRECISION;
    let (lo, hi) = match p {
        Precision::B16 => (-6, 6),
        Precision::B32 => (-60, 60),
        Precision::B64 => (-500, 500),
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut failures, mut skipped, mut done) = (0, 0, 0);
    while done < pairs {
        let a = random_float(p, lo, hi, &mut rng);
        let b = if rng.gen_bool(0.5) {
            random_float(p, lo, hi, &mut rng)
        } else {
            p.round(a * (1.0 + rng.gen_range(-0.5..0.5)) * pow2(rng.gen_range(-3..=3)))
        };
        let (s, e) = eft::two_sum::<F>(a, b);
        failures += usize::from(exact(s) + exact(e) != exact(a) + exact(b));
        let m = (a * b).abs();
        if m < p.min_normal() * pow2(p.significand_bits() as i32) || !p.round(m).is_finite() {
            skipped += 1;
            continue;
        }
        for (pp, ee) in [eft::two_prod::<F>(a, b), eft::two_prod_fma::<F>(a, b)] {
            failures += usize::from(exact(pp) + exact(ee) != exact(a) * exact(b));
        }
        done += 1;
    }
    (failures, skipped)
}

fn eft_exactness() -> Outcome {
    let pairs = 100_000;
    let mut parts = Vec::new();
    let mut total = 0;
    for (k, p) in Precision::ALL.into_iter().enumerate() {
        let (f, skipped) = match p {
            Precision::B16 => eft_failures::<Half>(pairs, k as u64),
            Precision::B32 => eft_failures::<Single>(pairs, k as u64),
            Precision::B64 => eft_failures::<Double>(pairs, k as u64),
        };
        total += f;
        parts.push(format!("{p} {f} failures ({skipped} products skipped)"));
    }
    // the scalar entry points share the kernels; spot-check one pair each way
    let (s, e) = scalar::two_sum(Precision::B32, 1.0, pow2(-30));
    total += usize::from(exact(s) + exact(e) != exact(1.0) + exact(pow2(-30)));
    outcome(total == 0, format!("{pairs} pairs per precision: {}", parts.join(", ")))
}

// ---------------------------------------------------------------------------
// 2. multiplication error profile

fn multiplication_profile() -> Outcome {
    let pooled = |nc| {
        let mut errs = Vec::new();
        for m in 0..=8 {
            errs.extend(
                experiments::profile_errors(ProfileOp::MulMcn, MagnitudeMode::Same, m, nc, Precision::B32, 1000, 0)
                    .unwrap(),
            );
        }
        experiments::median(&mut errs)
    };
    let (one, two) = (pooled(1), pooled(2));
    let in_band = (pow2(-26)..=pow2(-22)).contains(&one);
    outcome(
        in_band && two * 1e3 <= one,
        format!(
            "median over m=0..8: nc=1 {one:.3e} (2^{:.2}), nc=2 {two:.3e}, ratio {:.1e}",
            one.log2(),
            one / two
        ),
    )
}

// ---------------------------------------------------------------------------
// 3. single-component expansions are plain arithmetic

#[derive(Clone, Copy)]
enum BinOp {
    Add,
    Sub,
    Mul,
    Div,
}

/// Native arithmetic in the working format. Binary16 goes through `half`.
fn native(p: Precision, op: BinOp, a: f64, b: f64) -> f64 {
    macro_rules! apply {
        ($x:expr, $y:expr) => {
            match op {
                BinOp::Add => $x + $y,
                BinOp::Sub => $x - $y,
                BinOp::Mul => $x * $y,
                BinOp::Div => $x / $y,
            }
        };
    }
    match p {
        Precision::B16 => apply!(f16::from_f64(a), f16::from_f64(b)).to_f64(),
        Precision::B32 => f64::from(apply!(a as f32, b as f32)),
        Precision::B64 => apply!(a, b),
    }
}

fn native_matmul(p: Precision, a: &Tensor, b: &Tensor) -> Vec<f64> {
    let (m, k) = a.dims2().unwrap();
    let n = b.dims2().unwrap().1;
    match p {
        Precision::B16 => linalg::plain_matmul(p, a, b).unwrap().data().to_vec(),
        Precision::B32 => {
            let f = |t: &Tensor| t.data().iter().map(|&v| v as f32).collect::<Vec<_>>();
            linalg::native_matmul(&f(a), &f(b), (m, k, n)).into_iter().map(f64::from).collect()
        }
        Precision::B64 => linalg::native_matmul(a.data(), b.data(), (m, k, n)),
    }
}

fn bits(v: &[f64]) -> Vec<u64> {
    v.iter().map(|c| c.to_bits()).collect()
}

/// Exponent range per format; it reaches into the subnormal range, and
/// quotients and products stay finite.
fn scalar_range(p: Precision) -> (i32, i32) {
    match p {
        Precision::B16 => (-18, 5),
        Precision::B32 => (-130, 40),
        Precision::B64 => (-1030, 400),
    }
}

fn vector(p: Precision, n: usize, (lo, hi): (i32, i32), rng: &mut impl Rng) -> Vec<f64> {
    (0..n).map(|_| random_float(p, lo, hi, rng)).collect()
}

/// Number of mismatching elements for each scalar operator at `p`.
fn scalar_mismatches(p: Precision, cases: usize, rng: &mut impl Rng) -> Vec<(&'static str, usize)> {
    let range = scalar_range(p);
    let a = vector(p, cases, range, rng);
    let b = vector(p, cases, range, rng);
    let small: Vec<f64> = (0..cases).map(|_| p.round(rng.gen_range(-8.0..8.0))).collect();
    let t = |v: &[f64]| Tensor::from_vec(v.to_vec());
    let x = mct::from_float(&t(&a), 1, p).unwrap();
    let y = mct::from_float(&t(&b), 1, p).unwrap();
    let want = |op| a.iter().zip(&b).map(|(&u, &v)| native(p, op, u, v)).collect::<Vec<_>>();
    let count = |got: &McTensor, want: &[f64]| bits(got.data()).iter().zip(bits(want)).filter(|(g, w)| *g != w).count();
    let squares: Vec<f64> = a.iter().map(|&u| native(p, BinOp::Mul, u, u)).collect();
    let exps: Vec<f64> = small.iter().map(|&u| p.round(u.exp())).collect();
    vec![
        ("add", count(&mct::add_mcn(&x, &y).unwrap(), &want(BinOp::Add))),
        ("sub", count(&mct::sub_mcn(&x, &y).unwrap(), &want(BinOp::Sub))),
        ("mul", count(&mct::mul_mcn(&x, &y).unwrap(), &want(BinOp::Mul))),
        ("mul-slow", count(&mct::mul_mcn_slow(&x, &y).unwrap(), &want(BinOp::Mul))),
        ("div", count(&mct::div_mcn(&x, &y).unwrap(), &want(BinOp::Div))),
        ("div-by-mc", count(&mct::div_n(&t(&a), &y).unwrap(), &want(BinOp::Div))),
        ("scale", count(&mct::scaling_n(&x, &t(&b), false).unwrap(), &want(BinOp::Mul))),
        ("grow", count(&mct::grow_expn(&x, &t(&b)).unwrap(), &want(BinOp::Add))),
        ("square", count(&mct::square_mcn(&x), &squares)),
        ("exp", count(&mct::exp_mcn(&mct::from_float(&t(&small), 1, p).unwrap()), &exps)),
        ("negate", count(&mct::negate(&x), &a.iter().map(|v| -v).collect::<Vec<_>>())),
    ]
}

/// Mismatching outputs of dot, mv, mm and bmm over `cases` random shapes.
fn matrix_mismatches(p: Precision, cases: usize, rng: &mut impl Rng) -> Vec<(&'static str, usize)> {
    let range = match p {
        Precision::B16 => (-12, 3),
        Precision::B32 => (-70, 30),
        Precision::B64 => (-520, 200),
    };
    let mut counts = [0usize; 4];
    for case in 0..cases {
        let (m, k, n) = (rng.gen_range(1..6), rng.gen_range(1..12), rng.gen_range(1..6));
        let op = case % 4;
        let batch = if op == 3 { rng.gen_range(1..4) } else { 1 };
        let (m, n) = match op {
            0 => (1, 1),
            1 => (m, 1),
            _ => (m, n),
        };
        let mut got = Vec::new();
        let mut want = Vec::new();
        let mut xs = Vec::new();
        let mut ws = Vec::new();
        for _ in 0..batch {
            let x = Tensor::new(vec![m, k], vector(p, m * k, range, rng)).unwrap();
            let w = Tensor::new(vec![k, n], vector(p, k * n, range, rng)).unwrap();
            want.extend(native_matmul(p, &x, &w));
            xs.extend_from_slice(x.data());
            ws.extend_from_slice(w.data());
        }
        let mc = |shape: Vec<usize>| mct::from_float(&Tensor::new(shape, xs.clone()).unwrap(), 1, p).unwrap();
        let std = |shape: Vec<usize>| Tensor::new(shape, ws.clone()).unwrap();
        let r = match op {
            0 => linalg::dot_mcn(&mc(vec![k]), &std(vec![k])),
            1 => linalg::mv_mcn(&mc(vec![m, k]), &std(vec![k])),
            2 => linalg::mm_mcn(&mc(vec![m, k]), &std(vec![k, n])),
            _ => linalg::bmm_mcn(&mc(vec![batch, m, k]), &std(vec![batch, k, n])),
        };
        got.extend_from_slice(r.unwrap().data());
        counts[op] += usize::from(bits(&got) != bits(&want));
    }
    vec![("dot", counts[0]), ("mv", counts[1]), ("mm", counts[2]), ("bmm", counts[3])]
}

fn single_component_degeneracy() -> Outcome {
    let cases = 10_000;
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut bad = Vec::new();
    for p in Precision::ALL {
        let mut all = scalar_mismatches(p, cases, &mut rng);
        all.extend(matrix_mismatches(p, cases, &mut rng));
        bad.extend(all.into_iter().filter(|&(_, c)| c > 0).map(|(op, c)| format!("{p} {op}: {c}")));
    }
    let detail = if bad.is_empty() {
        format!("{cases} cases per scalar op and {cases} matrix products per precision, all bitwise equal")
    } else {
        format!("mismatches: {}", bad.join(", "))
    };
    outcome(bad.is_empty(), detail)
}

// ---------------------------------------------------------------------------
// 4. linear regression

fn linear_regression() -> Outcome {
    let mut cfg = RunConfig::new(Command::Linreg, None);
    cfg.nc = vec![2];
    let r = run(&cfg);
    let (half, mc, single) = (r.run("B16").unwrap(), r.run("2-MCB16").unwrap(), r.run("B32").unwrap());
    let ratio = mc.final_train_loss / half.final_train_loss;
    let mut worst = (0, 1.0f64);
    for point in &single.curve {
        let other = mc.loss_at(point.epoch).unwrap();
        let gap = (point.loss / other).max(other / point.loss);
        if !(gap <= worst.1) {
            worst = (point.epoch, gap);
        }
    }
    outcome(
        ratio <= 1e-3 && worst.1 <= 10.0,
        format!(
            "final loss B16 {:.3e}, 2-MCB16 {:.3e} (ratio {ratio:.1e}), B32 {:.3e}; widest B32 gap {:.1}x at epoch {}",
            half.final_train_loss, mc.final_train_loss, single.final_train_loss, worst.1, worst.0
        ),
    )
}

// ---------------------------------------------------------------------------
// 5. tiny updates

fn tiny_update_retention() -> Outcome {
    let p = Precision::B16;
    let tiny = pow2(-20);
    let truth = exact(1.0) - exact(1000.0) * exact(tiny);
    let mut ends = Vec::new();
    for nc in [1, 2] {
        let mut x = mct::from_float(&Tensor::from_vec(vec![1.0]), nc, p).unwrap();
        let mut opt = McSgd::new(1.0, 0.0);
        for _ in 0..1000 {
            x.zero_grad();
            x.accumulate_grad(&Tensor::from_vec(vec![tiny])).unwrap();
            opt.step(vec![("w".into(), &mut x)]).unwrap();
        }
        ends.push(exact_sum(x.element(0)));
    }
    let plain = to_f64(&ends[0]);
    let err = to_f64(&(ends[1].clone() - truth)).abs();
    outcome(
        plain == 1.0 && err <= tiny,
        format!("plain B16 ends at {plain}, 2-MCB16 off the exact sum by {err:.3e} (bound 2^-20)"),
    )
}

// ---------------------------------------------------------------------------
// 6. logistic regression

fn logistic_regression() -> Outcome {
    let mut cfg = RunConfig::new(Command::Logreg, Some(data_file("breast_cancer.csv")));
    cfg.nc = vec![2];
    let r = run(&cfg);
    let (mc, single) = (final_loss(&r, "2-MCB16"), final_loss(&r, "B32"));
    let (acc_mc, acc_half) = (metric(&r, "2-MCB16", "test_accuracy"), metric(&r, "B16", "test_accuracy"));
    outcome(
        (mc - single).abs() <= 5e-3 && acc_mc >= acc_half,
        format!(
            "loss 2-MCB16 {mc:.6} vs B32 {single:.6} (gap {:.1e}); test accuracy 2-MCB16 {acc_mc:.4} vs B16 {acc_half:.4}",
            (mc - single).abs()
        ),
    )
}

// ---------------------------------------------------------------------------
// 7. multilayer perceptron

fn multilayer_perceptron() -> Outcome {
    let path = data_file("breast_cancer.csv");
    let rows = data::load_csv(&path).unwrap().len();
    let test_rows = rows - (rows as f64 * 0.8).round() as usize;
    let mut cfg = RunConfig::new(Command::Mlp, Some(path));
    cfg.nc = vec![2, 3];
    let r = run(&cfg);
    let acc = |l| metric(&r, l, "test_accuracy");
    let (half, single, two, three) = (acc("B16"), acc("B32"), acc("2-MCB16"), acc("3-MCB16"));
    // one binomial standard error of the test accuracy, at least one example
    let noise = (two * (1.0 - two) / test_rows as f64).sqrt().max(1.0 / test_rows as f64);
    outcome(
        two >= half && (two - single).abs() <= 0.01 && (three - two).abs() <= noise,
        format!(
            "test accuracy B16 {half:.4}, B32 {single:.4}, 2-MCB16 {two:.4}, 3-MCB16 {three:.4} (noise {noise:.4})"
        ),
    )
}

// ---------------------------------------------------------------------------
// 8. gradients

fn gradient_checks() -> Outcome {
    let (emb, unused_zero) = mcfloat_validation::embedding();
    let [w, b, x] = mcfloat_validation::linear_layer();
    let [bce, bce_sigmoid] = mcfloat_validation::bce();
    let errs = [
        ("linear weight", w),
        ("linear bias", b),
        ("linear input", x),
        ("embedding", emb),
        ("softmax", mcfloat_validation::softmax()),
        ("mse", mcfloat_validation::mse()),
        ("bce", bce),
        ("bce through sigmoid", bce_sigmoid),
        ("cross-entropy", mcfloat_validation::cross_entropy()),
        ("hyperbolic loss", mcfloat_validation::hyperbolic_loss()),
    ];
    let worst = errs.iter().fold(("", 0.0f64), |w, &(n, e)| if e > w.1 { (n, e) } else { w });
    outcome(
        unused_zero && errs.iter().all(|&(_, e)| e < 1e-3),
        format!("{} cases, largest relative error {:.1e} ({})", errs.len(), worst.1, worst.0),
    )
}

// ---------------------------------------------------------------------------
// 9. hyperbolic embeddings

fn hyperbolic_embeddings() -> Outcome {
    let p = Precision::B64;
    let pt = |c: [f64; 2], nc| mct::from_float(&Tensor::from_vec(c.to_vec()), nc, p).unwrap();
    let unit = (1..=3)
        .map(|nc| (hyperbolic::point_distance(&pt([0.0, 1.0], nc), &pt([0.0, std::f64::consts::E], nc)).unwrap() - 1.0).abs())
        .fold(0.0, f64::max);

    let mut cfg = RunConfig::new(Command::Embed, None);
    cfg.precision = Precision::B64;
    cfg.nc = vec![1];
    cfg.epochs = 300;
    let map64 = metric(&run(&cfg), "B64", "map");

    let mut paired = Vec::new();
    let mut finite = true;
    for seed in 0..3 {
        let mut cfg = RunConfig::new(Command::Embed, None);
        cfg.seed = seed;
        let r = run(&cfg);
        let rec = r.run("2-MCB16").unwrap();
        finite &= rec.metric("non_finite_distances") == Some(0.0)
            && rec.metric("non_finite_parameters") == Some(0.0)
            && rec.curve.iter().all(|c| c.loss.is_finite());
        paired.push((metric(&r, "B16", "map"), metric(&r, "2-MCB16", "map")));
    }
    let ordered = paired.iter().all(|(one, two)| two >= one);
    let pairs: Vec<String> = paired.iter().map(|(a, b)| format!("{a:.3}/{b:.3}")).collect();
    outcome(
        unit <= 1e-12 && map64 >= 0.9 && finite && ordered,
        format!(
            "unit distance error {unit:.1e}; B64 MAP {map64:.3}; B16 MAP nc=1/nc=2 by seed {}; nc=2 finite: {finite}",
            pairs.join(", ")
        ),
    )
}

// ---------------------------------------------------------------------------
// 10. timing order

fn benchmark_ordering() -> Outcome {
    let cfg = RunConfig::new(Command::Bench, None);
    let mut ok = true;
    let mut parts = Vec::new();
    for op in BenchOp::ALL {
        let times: Vec<f64> = [None, Some(1), Some(2), Some(3)]
            .into_iter()
            .map(|nc| experiments::bench_op(op, nc, cfg.precision, &cfg).unwrap().mean_seconds)
            .collect();
        ok &= times.windows(2).all(|w| w[0] < w[1]);
        let us: Vec<String> = times.iter().map(|t| format!("{:.1}", t * 1e6)).collect();
        parts.push(format!("{op:?} {}", us.join(" < ")));
    }
    outcome(ok, format!("mean us plain/1/2/3 components: {}", parts.join("; ")))
}

#[test]
fn acceptance() {
    let secs = Duration::from_secs;
    let results = [
        criterion(1, "EFT exactness", Some(secs(60)), eft_exactness),
        criterion(2, "multiplication error profile", Some(secs(120)), multiplication_profile),
        criterion(3, "single-component degeneracy", None, single_component_degeneracy),
        criterion(4, "linear regression", Some(secs(120)), linear_regression),
        criterion(5, "tiny-update retention", Some(secs(10)), tiny_update_retention),
        criterion(6, "logistic regression", Some(secs(180)), logistic_regression),
        criterion(7, "multilayer perceptron", Some(secs(300)), multilayer_perceptron),
        criterion(8, "gradient correctness", None, gradient_checks),
        criterion(9, "hyperbolic embeddings", Some(secs(600)), hyperbolic_embeddings),
        criterion(10, "benchmark ordering", None, benchmark_ordering),
    ];
    let failed: Vec<usize> = results.iter().enumerate().filter(|(_, &ok)| !ok).map(|(i, _)| i + 1).collect();
    assert!(failed.is_empty(), "failed criteria: {failed:?}");
}
