//! Experiment drivers behind the command-line harness.
//!
//! Every driver is deterministic given its [`RunConfig`]: random streams are
//! derived from the seed, reductions follow the configured plan, and the
//! report numerics do not depend on wall-clock measurements (those live in
//! separate fields).
//!
//! Reported training losses are measured in binary64 from the exact
//! parameter values on the working-precision data, so the curves compare
//! what the models learned rather than how noisily the loss was summed.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::hint::black_box;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::data::{self, Table};
use crate::eft;
use crate::error::{Error, Result};
use crate::hyperbolic::{self, EdgeDataset, TrainConfig};
use crate::linalg::{self, ReductionPlan};
use crate::mct::{self, McTensor};
use crate::nn::{Activation, Layer, MCLinear, MCSequential, Module};
use crate::optim::{McSgd, Optimizer};
use crate::oracle;
use crate::precision::Precision;
use crate::tensor::Tensor;

pub const VERSION: &str = env!("CARGO_PKG_VERSION");

/// Largest component count accepted on the command line.
pub const MAX_NC: usize = 8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Command {
    ErrProfile,
    Linreg,
    Logreg,
    Mlp,
    Embed,
    Bench,
}

impl Command {
    pub const ALL: [Command; 6] =
        [Command::ErrProfile, Command::Linreg, Command::Logreg, Command::Mlp, Command::Embed, Command::Bench];

    pub const fn name(self) -> &'static str {
        match self {
            Command::ErrProfile => "err-profile",
            Command::Linreg => "linreg",
            Command::Logreg => "logreg",
            Command::Mlp => "mlp",
            Command::Embed => "embed",
            Command::Bench => "bench",
        }
    }
}

impl fmt::Display for Command {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Command {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Command::ALL
            .into_iter()
            .find(|c| c.name() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown command `{s}`")))
    }
}

/// Everything a run depends on. Serialized verbatim into its report.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub command: Command,
    pub precision: Precision,
    pub nc: Vec<usize>,
    pub seed: u64,
    pub lr: f64,
    pub momentum: f64,
    pub epochs: usize,
    /// Mini-batch size; `None` trains on the full batch.
    pub batch_size: Option<usize>,
    /// Loss is recorded every `log_every` epochs and after the last one.
    pub log_every: usize,
    pub data: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub plan: ReductionPlan,
    pub mc_state: bool,
    pub fma: bool,
    /// Rows of a synthetic dataset, or samples per error-profile cell.
    pub samples: usize,
    /// Hidden widths of the MLP.
    pub hidden: Vec<usize>,
    /// Embedding dimension.
    pub dim: usize,
    pub negatives: usize,
    pub warmup: usize,
    pub repeats: usize,
}

impl RunConfig {
    /// Defaults for `command`; a few depend on whether a dataset is given.
    pub fn new(command: Command, data: Option<PathBuf>) -> Self {
        let mut c = RunConfig {
            command,
            precision: Precision::B16,
            nc: vec![1, 2, 3],
            seed: 0,
            lr: 0.05,
            momentum: 0.0,
            epochs: 500,
            batch_size: None,
            log_every: 10,
            data,
            out: None,
            plan: ReductionPlan::default(),
            mc_state: false,
            fma: eft::fma_enabled(),
            samples: 1000,
            hidden: vec![32, 16],
            dim: 5,
            negatives: 50,
            warmup: 1,
            repeats: 5,
        };
        match command {
            Command::ErrProfile => {
                c.precision = Precision::B32;
                c.nc = vec![1, 2, 3, 4];
            }
            Command::Linreg => {}
            Command::Logreg if c.data.is_some() => {
                c.lr = 1e-4;
                c.momentum = 0.9;
                c.epochs = 3000;
                c.log_every = 50;
            }
            Command::Logreg => {
                c.lr = 3e-3;
                c.epochs = 4000;
                c.log_every = 50;
            }
            Command::Mlp => {
                c.lr = 0.01;
                c.momentum = 0.9;
                c.epochs = 300;
            }
            Command::Embed => {
                c.nc = vec![1, 2];
                c.lr = 3.0;
                c.epochs = 100;
                c.batch_size = Some(32);
            }
            Command::Bench => {
                c.precision = Precision::B32;
            }
        }
        c
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if self.nc.is_empty() {
            return bad("--nc needs at least one component count".into());
        }
        if let Some(&k) = self.nc.iter().find(|&&k| k == 0 || k > MAX_NC) {
            return bad(format!("component count {k} outside 1..={MAX_NC}"));
        }
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return bad(format!("learning rate must be positive and finite, got {}", self.lr));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad(format!("momentum must lie in [0, 1), got {}", self.momentum));
        }
        if self.epochs == 0 || self.log_every == 0 || self.samples == 0 || self.repeats == 0 {
            return bad("epochs, log interval, samples and repeats must be positive".into());
        }
        if self.batch_size == Some(0) {
            return bad("batch size must be positive".into());
        }
        if self.command == Command::Embed && (self.dim < 2 || self.negatives == 0) {
            return bad("embeddings need dim >= 2 and at least one negative".into());
        }
        if self.hidden.contains(&0) {
            return bad("hidden widths must be positive".into());
        }
        if self.command == Command::Mlp && self.data.is_none() {
            return bad("mlp needs a CSV dataset (--data)".into());
        }
        if let Some(path) = &self.data {
            if !path.is_file() {
                return bad(format!("dataset {} does not exist", path.display()));
            }
        }
        Ok(())
    }

    /// Plain baselines (`nc = 1`) at `baselines` followed by the MC variants
    /// at the configured precision, without duplicates.
    fn variants(&self, baselines: &[Precision]) -> Vec<(Precision, usize)> {
        let mut out: Vec<(Precision, usize)> = baselines.iter().map(|&p| (p, 1)).collect();
        for &nc in &self.nc {
            if !out.contains(&(self.precision, nc)) {
                out.push((self.precision, nc));
            }
        }
        out
    }
}

/// `B16` for a plain run, `2-MCB16` for a 2-component one.
pub fn label(precision: Precision, nc: usize) -> String {
    let tag = precision.tag().to_ascii_uppercase();
    if nc == 1 {
        tag
    } else {
        format!("{nc}-MC{tag}")
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub epoch: usize,
    pub loss: f64,
}

/// One trained model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub label: String,
    pub precision: Precision,
    pub nc: usize,
    pub curve: Vec<CurvePoint>,
    pub final_train_loss: f64,
    /// Named scalar results, e.g. `test_accuracy` or `map`.
    pub metrics: BTreeMap<String, f64>,
    pub seconds_per_epoch: f64,
}

impl RunRecord {
    fn new(precision: Precision, nc: usize, curve: Vec<CurvePoint>, seconds_per_epoch: f64) -> Self {
        RunRecord {
            label: label(precision, nc),
            precision,
            nc,
            final_train_loss: curve.last().map_or(f64::NAN, |c| c.loss),
            curve,
            metrics: BTreeMap::new(),
            seconds_per_epoch,
        }
    }

    pub fn metric(&self, name: &str) -> Option<f64> {
        self.metrics.get(name).copied()
    }

    /// Loss at a logged epoch.
    pub fn loss_at(&self, epoch: usize) -> Option<f64> {
        self.curve.iter().find(|c| c.epoch == epoch).map(|c| c.loss)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ProfileOp {
    AddMcn,
    ScalingN,
    MulMcn,
}

impl ProfileOp {
    pub const ALL: [ProfileOp; 3] = [ProfileOp::AddMcn, ProfileOp::ScalingN, ProfileOp::MulMcn];
}

/// How operand magnitudes are drawn: both at order `m`, or the first at `m`
/// and the second at order 0.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MagnitudeMode {
    Same,
    Varying,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProfileCell {
    pub op: ProfileOp,
    pub mode: MagnitudeMode,
    pub m: i32,
    pub nc: usize,
    /// Samples whose inputs and exact result are finite in the format.
    pub samples: usize,
    pub median_rel_error: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BenchOp {
    Dot,
    Mv,
    Matmul,
}

impl BenchOp {
    pub const ALL: [BenchOp; 3] = [BenchOp::Dot, BenchOp::Mv, BenchOp::Matmul];

    pub const fn sizes(self) -> &'static str {
        match self {
            BenchOp::Dot => "5000, 5000",
            BenchOp::Mv => "(5000x500), 500",
            BenchOp::Matmul => "(500x200), (200x50)",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchRow {
    pub op: BenchOp,
    pub sizes: String,
    /// `None` for the plain working-precision operator.
    pub nc: Option<usize>,
    pub repeats: usize,
    pub mean_seconds: f64,
    pub sd_seconds: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub version: String,
    pub fma_enabled: bool,
    pub precision: Precision,
    pub config: RunConfig,
    pub runs: Vec<RunRecord>,
    pub error_profile: Vec<ProfileCell>,
    pub bench: Vec<BenchRow>,
}

impl RunReport {
    pub fn run(&self, label: &str) -> Option<&RunRecord> {
        self.runs.iter().find(|r| r.label == label)
    }

    pub fn profile(&self, op: ProfileOp, mode: MagnitudeMode, m: i32, nc: usize) -> Option<&ProfileCell> {
        self.error_profile.iter().find(|c| c.op == op && c.mode == mode && c.m == m && c.nc == nc)
    }

    pub fn bench_row(&self, op: BenchOp, nc: Option<usize>) -> Option<&BenchRow> {
        self.bench.iter().find(|r| r.op == op && r.nc == nc)
    }

    /// The report with every timing field zeroed; equal for equal configs.
    pub fn numerics(&self) -> RunReport {
        let mut r = self.clone();
        for run in &mut r.runs {
            run.seconds_per_epoch = 0.0;
        }
        for b in &mut r.bench {
            b.mean_seconds = 0.0;
            b.sd_seconds = 0.0;
        }
        r
    }

    /// Short human-readable table.
    pub fn summary(&self) -> String {
        let mut s = format!("mcfloat {} {} (precision {}, fma {})\n", self.version, self.config.command, self.precision, self.fma_enabled);
        for r in &self.runs {
            s += &format!("{:<10} final loss {:.6e}", r.label, r.final_train_loss);
            for (k, v) in &r.metrics {
                s += &format!("  {k} {v:.6}");
            }
            s.push('\n');
        }
        for c in &self.error_profile {
            s += &format!(
                "{:?} {:?} m={} nc={} median rel. error {:.3e} ({} samples)\n",
                c.op, c.mode, c.m, c.nc, c.median_rel_error, c.samples
            );
        }
        for b in &self.bench {
            let who = b.nc.map_or("plain".to_string(), |k| format!("{k}-MC"));
            s += &format!(
                "{:?} [{}] {who}: {:.3e} s +- {:.1e} over {} repeats\n",
                b.op, b.sizes, b.mean_seconds, b.sd_seconds, b.repeats
            );
        }
        s
    }
}

/// Independent random stream `k` of a seed.
fn stream(seed: u64, k: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(k);
    rng
}

/// Runs the experiment and writes its outputs when `cfg.out` is set.
pub fn run(cfg: &RunConfig) -> Result<RunReport> {
    cfg.validate()?;
    eft::set_fma_enabled(cfg.fma);
    let mut report = RunReport {
        version: VERSION.to_string(),
        fma_enabled: eft::fma_enabled(),
        precision: cfg.precision,
        config: cfg.clone(),
        runs: Vec::new(),
        error_profile: Vec::new(),
        bench: Vec::new(),
    };
    match cfg.command {
        Command::ErrProfile => report.error_profile = error_profile(cfg)?,
        Command::Linreg => report.runs = linreg(cfg)?,
        Command::Logreg => report.runs = logreg(cfg)?,
        Command::Mlp => report.runs = mlp(cfg)?,
        Command::Embed => report.runs = embed(cfg)?,
        Command::Bench => report.bench = bench(cfg)?,
    }
    if let Some(dir) = &cfg.out {
        write_report(&report, dir)?;
    }
    Ok(report)
}

/// Writes `report.json` plus flat CSV tables into `dir`.
pub fn write_report(report: &RunReport, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    fs::write(dir.join("report.json"), serde_json::to_string_pretty(report)?)?;
    if !report.runs.is_empty() {
        let mut csv = String::from("run,precision,nc,epoch,loss\n");
        for r in &report.runs {
            for c in &r.curve {
                csv += &format!("{},{},{},{},{:e}\n", r.label, r.precision, r.nc, c.epoch, c.loss);
            }
        }
        fs::write(dir.join("curves.csv"), csv)?;
    }
    if !report.error_profile.is_empty() {
        let mut csv = String::from("op,mode,m,nc,samples,median_rel_error\n");
        for c in &report.error_profile {
            let op = serde_json::to_value(c.op)?;
            let mode = serde_json::to_value(c.mode)?;
            csv += &format!(
                "{},{},{},{},{},{:e}\n",
                op.as_str().unwrap_or_default(),
                mode.as_str().unwrap_or_default(),
                c.m,
                c.nc,
                c.samples,
                c.median_rel_error
            );
        }
        fs::write(dir.join("profile.csv"), csv)?;
    }
    if !report.bench.is_empty() {
        let mut csv = String::from("op,sizes,nc,repeats,mean_seconds,sd_seconds\n");
        for b in &report.bench {
            let op = serde_json::to_value(b.op)?;
            csv += &format!(
                "{},\"{}\",{},{},{:e},{:e}\n",
                op.as_str().unwrap_or_default(),
                b.sizes,
                b.nc.map_or("plain".to_string(), |k| k.to_string()),
                b.repeats,
                b.mean_seconds,
                b.sd_seconds
            );
        }
        fs::write(dir.join("bench.csv"), csv)?;
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// error profile

pub fn median(v: &mut [f64]) -> f64 {
    if v.is_empty() {
        return f64::NAN;
    }
    v.sort_by(f64::total_cmp);
    let k = v.len() / 2;
    if v.len() % 2 == 1 {
        v[k]
    } else {
        0.5 * (v[k - 1] + v[k])
    }
}

/// Median oracle relative error of one operator for one magnitude and
/// component count.
pub fn profile_cell(
    op: ProfileOp,
    mode: MagnitudeMode,
    m: i32,
    nc: usize,
    precision: Precision,
    samples: usize,
    seed: u64,
) -> Result<ProfileCell> {
    let mut errs = profile_errors(op, mode, m, nc, precision, samples, seed)?;
    Ok(ProfileCell { op, mode, m, nc, samples: errs.len(), median_rel_error: median(&mut errs) })
}

/// Per-sample oracle relative errors behind [`profile_cell`], in sample order.
pub fn profile_errors(
    op: ProfileOp,
    mode: MagnitudeMode,
    m: i32,
    nc: usize,
    precision: Precision,
    samples: usize,
    seed: u64,
) -> Result<Vec<f64>> {
    let cell_id = (op as u64) << 32 | (mode as u64) << 24 | (m as u64 & 0xff) << 8 | nc as u64;
    let mut rng = stream(seed, cell_id);
    let my = match mode {
        MagnitudeMode::Same => m,
        MagnitudeMode::Varying => 0,
    };
    let mut xs = Vec::with_capacity(samples * nc);
    let mut ys = Vec::with_capacity(samples * nc);
    let mut vs = Vec::with_capacity(samples);
    for _ in 0..samples {
        xs.extend(oracle::sample_expansion(m, nc, precision, &mut rng));
        ys.extend(oracle::sample_expansion(my, nc, precision, &mut rng));
        vs.push(oracle::sample_magnitude(my, precision, &mut rng));
    }
    let finite = |c: &[f64]| c.iter().all(|v| v.is_finite());
    // inputs that overflowed are replaced by zero and excluded below
    let keep: Vec<bool> = (0..samples)
        .map(|i| finite(&xs[i * nc..(i + 1) * nc]) && finite(&ys[i * nc..(i + 1) * nc]) && vs[i].is_finite())
        .collect();
    for (i, &k) in keep.iter().enumerate() {
        if !k {
            xs[i * nc..(i + 1) * nc].fill(0.0);
            ys[i * nc..(i + 1) * nc].fill(0.0);
            vs[i] = 0.0;
        }
    }
    let x = McTensor::from_components(vec![samples], nc, precision, xs)?;
    let y = McTensor::from_components(vec![samples], nc, precision, ys)?;
    let v = Tensor::from_vec(vs);
    let out = match op {
        ProfileOp::AddMcn => mct::add_mcn(&x, &y)?,
        ProfileOp::ScalingN => mct::scaling_n(&x, &v, false)?,
        ProfileOp::MulMcn => mct::mul_mcn(&x, &y)?,
    };
    let (xe, ye) = (oracle::value_of(&x), oracle::value_of(&y));
    let got = oracle::value_of(&out);
    let mut errs = Vec::with_capacity(samples);
    for i in 0..samples {
        if !keep[i] || !finite(out.element(i)) {
            continue;
        }
        let truth = match op {
            ProfileOp::AddMcn => &xe[i] + &ye[i],
            ProfileOp::ScalingN => &xe[i] * oracle::exact(v.data()[i]),
            ProfileOp::MulMcn => &xe[i] * &ye[i],
        };
        if oracle::to_f64(&truth).abs() > precision.max_finite() {
            continue;
        }
        errs.push(oracle::rel_error(&got[i], &truth));
    }
    Ok(errs)
}

fn error_profile(cfg: &RunConfig) -> Result<Vec<ProfileCell>> {
    let mut out = Vec::new();
    for op in ProfileOp::ALL {
        for mode in [MagnitudeMode::Same, MagnitudeMode::Varying] {
            for m in 0..=8 {
                for &nc in &cfg.nc {
                    out.push(profile_cell(op, mode, m, nc, cfg.precision, cfg.samples, cfg.seed)?);
                }
            }
        }
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// supervised training

/// Training objective with its targets.
#[derive(Clone, Debug)]
pub enum Objective {
    Mse(Tensor),
    Bce(Tensor),
    CrossEntropy(Vec<usize>),
}

impl Objective {
    fn select(&self, idx: &[usize]) -> Result<Objective> {
        Ok(match self {
            Objective::Mse(t) => Objective::Mse(t.select_rows(idx)?),
            Objective::Bce(t) => Objective::Bce(t.select_rows(idx)?),
            Objective::CrossEntropy(l) => Objective::CrossEntropy(idx.iter().map(|&i| l[i]).collect()),
        })
    }

    fn on_tape(&self, tape: &Tape, out: Var) -> Result<Var> {
        match self {
            Objective::Mse(t) => tape.mse(out, t),
            Objective::Bce(t) => tape.bce(out, t),
            Objective::CrossEntropy(l) => tape.cross_entropy(out, l),
        }
    }

    /// Loss of binary64 model outputs.
    pub fn eval(&self, out: &Tensor) -> Result<f64> {
        let n = out.shape()[0] as f64;
        Ok(match self {
            Objective::Mse(t) => {
                out.zip_map(t, |o, y| (o - y) * (o - y))?.data().iter().sum::<f64>() / out.numel() as f64
            }
            Objective::Bce(t) => {
                let nll = out.zip_map(t, |q, y| -(y * q.ln().max(-100.0) + (1.0 - y) * (1.0 - q).ln().max(-100.0)))?;
                nll.data().iter().sum::<f64>() / out.numel() as f64
            }
            Objective::CrossEntropy(labels) => {
                let (_, k) = out.dims2()?;
                let mut total = 0.0;
                for (i, &l) in labels.iter().enumerate() {
                    let row = &out.data()[i * k..(i + 1) * k];
                    let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let lse = mx + row.iter().map(|v| (v - mx).exp()).sum::<f64>().ln();
                    total += lse - row[l];
                }
                total / n
            }
        })
    }
}

fn activation_f64(a: Activation, v: f64) -> f64 {
    match a {
        Activation::Relu => v.max(0.0),
        Activation::Sigmoid => 1.0 / (1.0 + (-v).exp()),
        Activation::Tanh => v.tanh(),
        Activation::Gelu => {
            let c = (2.0 / std::f64::consts::PI).sqrt();
            0.5 * v * (1.0 + (c * (v + 0.044715 * v * v * v)).tanh())
        }
    }
}

/// Component sums in binary64.
fn exact_values(t: &McTensor) -> Vec<f64> {
    (0..t.numel()).map(|i| t.element(i).iter().rev().sum()).collect()
}

/// Forward pass in binary64 using the parameters' full values.
pub fn forward_f64(model: &MCSequential, x: &Tensor) -> Result<Tensor> {
    let mut h = x.clone();
    for layer in &model.layers {
        h = match layer {
            Layer::Linear(lin) => {
                let (n, k) = h.dims2()?;
                let o = lin.out_features;
                let w = exact_values(&lin.weight);
                let b = lin.bias.as_ref().map(exact_values).unwrap_or_else(|| vec![0.0; o]);
                let mut out = vec![0.0; n * o];
                for i in 0..n {
                    let xi = h.row(i);
                    for j in 0..o {
                        let wj = &w[j * k..(j + 1) * k];
                        out[i * o + j] = b[j] + xi.iter().zip(wj).map(|(a, c)| a * c).sum::<f64>();
                    }
                }
                Tensor::new(vec![n, o], out)?
            }
            Layer::Activation(a) => h.map(|v| activation_f64(*a, v)),
        };
    }
    Ok(h)
}

/// Forward pass in the working precision, as the trained model computes it.
pub fn predict(model: &MCSequential, precision: Precision, x: &Tensor) -> Result<Tensor> {
    let tape = Tape::new(precision);
    let xv = tape.leaf(&x.rounded(precision));
    let out = model.forward(&tape, xv)?;
    tape.value(out)
}

/// Fraction of correct predictions.
pub fn accuracy(out: &Tensor, obj: &Objective) -> Result<f64> {
    let correct = match obj {
        Objective::Bce(t) => out.data().iter().zip(t.data()).filter(|(q, y)| (**q >= 0.5) == (**y >= 0.5)).count(),
        Objective::CrossEntropy(l) => out.argmax_rows()?.iter().zip(l).filter(|(a, b)| a == b).count(),
        Objective::Mse(_) => return Err(Error::InvalidArgument("accuracy needs a classification objective".into())),
    };
    Ok(correct as f64 / out.shape()[0] as f64)
}

fn train_step(model: &mut MCSequential, opt: &mut McSgd, p: Precision, x: &Tensor, obj: &Objective) -> Result<()> {
    let tape = Tape::new(p);
    let xv = tape.leaf(x);
    let out = model.forward(&tape, xv)?;
    let loss = obj.on_tape(&tape, out)?;
    let grads = tape.backward(loss)?;
    model.zero_grad();
    model.accumulate_grads(&grads)?;
    opt.step_module(model)
}

/// Trains with MC-SGD on working-precision data `x`. Returns the logged
/// binary64 loss curve (epoch 0 is the initial model) and seconds per epoch.
pub fn fit(
    model: &mut MCSequential,
    precision: Precision,
    x: &Tensor,
    obj: &Objective,
    cfg: &RunConfig,
    rng: &mut ChaCha8Rng,
) -> Result<(Vec<CurvePoint>, f64)> {
    model.set_plan(cfg.plan);
    let mut opt = McSgd::new(cfg.lr, cfg.momentum).with_mc_state(cfg.mc_state);
    let n = x.shape()[0];
    let mut order: Vec<usize> = (0..n).collect();
    let mut curve = vec![CurvePoint { epoch: 0, loss: obj.eval(&forward_f64(model, x)?)? }];
    let mut train_secs = 0.0;
    for epoch in 1..=cfg.epochs {
        let start = Instant::now();
        match cfg.batch_size {
            Some(b) if b < n => {
                order.shuffle(rng);
                for chunk in order.chunks(b) {
                    train_step(model, &mut opt, precision, &x.select_rows(chunk)?, &obj.select(chunk)?)?;
                }
            }
            _ => train_step(model, &mut opt, precision, x, obj)?,
        }
        train_secs += start.elapsed().as_secs_f64();
        if epoch % cfg.log_every == 0 || epoch == cfg.epochs {
            curve.push(CurvePoint { epoch, loss: obj.eval(&forward_f64(model, x)?)? });
        }
    }
    Ok((curve, train_secs / cfg.epochs as f64))
}

/// The regression set: `X` with entries `N(-0.5, 0.5²)` and a target weight
/// `w*` drawn from the same law. Labels are `X w*ᵀ` in binary64; runs
/// recompute them from their rounded copy of `X` (see [`regression_targets`]).
pub fn regression_data(rows: usize, seed: u64) -> (Table, [f64; 2]) {
    let mut rng = stream(seed, 0);
    let law = Normal::new(-0.5, 0.5).expect("valid law");
    let x: Vec<f64> = (0..rows * 2).map(|_| law.sample(&mut rng)).collect();
    let w = [law.sample(&mut rng), law.sample(&mut rng)];
    let labels = (0..rows).map(|i| x[2 * i] * w[0] + x[2 * i + 1] * w[1]).collect();
    (Table { features: Tensor::new(vec![rows, 2], x).expect("rows x 2"), labels }, w)
}

/// Targets of a run on features `x` already rounded to `p`: `y = x w*ᵀ`
/// evaluated in binary64 (exact for binary16 inputs) and held as an
/// `nc`-component expansion, i.e. at the precision the model represents.
pub fn regression_targets(x: &Tensor, w: &[f64], nc: usize, p: Precision) -> Result<Tensor> {
    let (n, _) = x.dims2()?;
    let y: Vec<f64> = (0..n).map(|i| x.row(i).iter().zip(w).map(|(a, b)| a * b).sum()).collect();
    let e = mct::expand(&Tensor::new(vec![n, 1], y)?, nc, p)?;
    Tensor::new(vec![n, 1], exact_values(&e))
}

/// Binary classification with one informative feature (class means ±1) and
/// one pure-noise feature, both with unit variance.
pub fn synthetic_classification(rows: usize, seed: u64) -> Table {
    let mut rng = stream(seed, 0);
    let mut x = Vec::with_capacity(rows * 2);
    let mut labels = Vec::with_capacity(rows);
    for _ in 0..rows {
        let y = rng.gen_bool(0.5);
        let z1: f64 = rng.sample(StandardNormal);
        let z2: f64 = rng.sample(StandardNormal);
        x.push(if y { 1.0 } else { -1.0 } + z1);
        x.push(z2);
        labels.push(if y { 1.0 } else { 0.0 });
    }
    Table { features: Tensor::new(vec![rows, 2], x).expect("rows x 2"), labels }
}

fn load_table(cfg: &RunConfig) -> Result<Option<Table>> {
    cfg.data.as_deref().map(data::load_csv).transpose()
}

fn linreg(cfg: &RunConfig) -> Result<Vec<RunRecord>> {
    // a CSV regression set is used as given; the synthetic one is exactly
    // realizable at every precision
    let (table, weight) = match load_table(cfg)? {
        Some(t) => (t, None),
        None => {
            let (t, w) = regression_data(cfg.samples, cfg.seed);
            (t, Some(w))
        }
    };
    let n = table.len();
    let d = table.num_features();
    let labels = Tensor::new(vec![n, 1], table.labels.clone())?;
    let mut out = Vec::new();
    for (p, nc) in cfg.variants(&Precision::ALL) {
        let x = table.features.rounded(p);
        let y = match &weight {
            Some(w) => regression_targets(&x, w, nc, p)?,
            None => Tensor::new(vec![n, 1], exact_values(&mct::expand(&labels, nc, p)?))?,
        };
        let obj = Objective::Mse(y);
        let lin = MCLinear::new(d, 1, false, nc, p, &mut stream(cfg.seed, 1))?;
        let mut model = MCSequential::new(vec![Layer::Linear(lin)])?;
        let (curve, secs) = fit(&mut model, p, &x, &obj, cfg, &mut stream(cfg.seed, 2))?;
        out.push(RunRecord::new(p, nc, curve, secs));
    }
    Ok(out)
}

/// 80/20 split, standardized with the training statistics.
fn prepared_split(table: &Table, seed: u64) -> Result<(Table, Table)> {
    let (train, test) = table.split(0.8, &mut stream(seed, 3))?;
    let (mean, std) = train.column_stats();
    Ok((train.standardized(&mean, &std), test.standardized(&mean, &std)))
}

/// Trains one classifier and records train/test accuracy.
fn classify(
    cfg: &RunConfig,
    p: Precision,
    nc: usize,
    train: &Table,
    test: &Table,
    make: impl Fn(&mut ChaCha8Rng) -> Result<MCSequential>,
    objective: impl Fn(&Table) -> Result<Objective>,
) -> Result<RunRecord> {
    let x = train.features.rounded(p);
    let obj = objective(train)?;
    let mut model = make(&mut stream(cfg.seed, 1))?;
    let (curve, secs) = fit(&mut model, p, &x, &obj, cfg, &mut stream(cfg.seed, 2))?;
    let mut rec = RunRecord::new(p, nc, curve, secs);
    rec.metrics.insert("train_accuracy".into(), accuracy(&predict(&model, p, &train.features)?, &obj)?);
    rec.metrics.insert("test_accuracy".into(), accuracy(&predict(&model, p, &test.features)?, &objective(test)?)?);
    Ok(rec)
}

fn logreg(cfg: &RunConfig) -> Result<Vec<RunRecord>> {
    let table = match load_table(cfg)? {
        Some(t) => t,
        None => synthetic_classification(cfg.samples, cfg.seed),
    };
    let (train, test) = prepared_split(&table, cfg.seed)?;
    let d = table.num_features();
    let objective = |t: &Table| Ok(Objective::Bce(Tensor::new(vec![t.len(), 1], t.labels.clone())?));
    cfg.variants(&[Precision::B16, Precision::B32])
        .into_iter()
        .map(|(p, nc)| {
            let make = |rng: &mut ChaCha8Rng| {
                let lin = MCLinear::new(d, 1, true, nc, p, rng)?;
                MCSequential::new(vec![Layer::Linear(lin), Layer::Activation(Activation::Sigmoid)])
            };
            classify(cfg, p, nc, &train, &test, make, objective)
        })
        .collect()
}

fn mlp(cfg: &RunConfig) -> Result<Vec<RunRecord>> {
    let table = load_table(cfg)?.ok_or_else(|| Error::InvalidArgument("mlp needs a CSV dataset (--data)".into()))?;
    let classes = table.class_labels()?.into_iter().max().unwrap_or(0) + 1;
    let (train, test) = prepared_split(&table, cfg.seed)?;
    let mut widths = vec![table.num_features()];
    widths.extend(&cfg.hidden);
    widths.push(classes);
    let objective = |t: &Table| Ok(Objective::CrossEntropy(t.class_labels()?));
    cfg.variants(&[Precision::B16, Precision::B32])
        .into_iter()
        .map(|(p, nc)| {
            let make = |rng: &mut ChaCha8Rng| MCSequential::mlp(&widths, Activation::Relu, nc, p, rng);
            classify(cfg, p, nc, &train, &test, make, objective)
        })
        .collect()
}

// ---------------------------------------------------------------------------
// hyperbolic embeddings

/// Bundled default hierarchy: 200 nodes of a complete ternary tree.
pub fn default_tree() -> data::EdgeList {
    data::complete_tree(3, 200).expect("valid tree")
}

fn embed(cfg: &RunConfig) -> Result<Vec<RunRecord>> {
    let edges = match &cfg.data {
        Some(path) => data::load_tsv(path)?,
        None => default_tree(),
    };
    let dataset = EdgeDataset::transitive_closure(&edges, cfg.negatives)?;
    let mut out = Vec::new();
    for &nc in &cfg.nc {
        let tc = TrainConfig {
            dim: cfg.dim,
            nc,
            precision: cfg.precision,
            lr: cfg.lr,
            epochs: cfg.epochs,
            batch_size: cfg.batch_size.unwrap_or(32),
            negatives: cfg.negatives,
            seed: cfg.seed,
            init_scale: 1e-3,
        };
        let start = Instant::now();
        let (emb, history) = hyperbolic::train(&dataset, &tc, |_| {})?;
        let secs = start.elapsed().as_secs_f64() / cfg.epochs as f64;
        let curve = history
            .iter()
            .filter(|h| (h.epoch + 1) % cfg.log_every == 0 || h.epoch + 1 == cfg.epochs)
            .map(|h| CurvePoint { epoch: h.epoch + 1, loss: h.loss })
            .collect();
        let dist = hyperbolic::distance_matrix(&emb.table)?;
        let rec_metrics = hyperbolic::map_and_mean_rank(&dist, &dataset.neighbors);
        let mut rec = RunRecord::new(cfg.precision, nc, curve, secs);
        rec.metrics.insert("map".into(), rec_metrics.map);
        rec.metrics.insert("mean_rank".into(), rec_metrics.mean_rank);
        rec.metrics.insert("clamped".into(), history.iter().map(|h| h.clamped).sum::<usize>() as f64);
        rec.metrics.insert("non_finite_distances".into(), dist.iter().filter(|d| !d.is_finite()).count() as f64);
        rec.metrics.insert("non_finite_parameters".into(), f64::from(u8::from(emb.table.has_non_finite())));
        if let Some(dir) = &cfg.out {
            fs::create_dir_all(dir)?;
            fs::write(dir.join(format!("embedding_{}.mct", rec.label)), emb.table.to_bytes())?;
            let ids: BTreeMap<&str, usize> = dataset.names.iter().enumerate().map(|(i, n)| (n.as_str(), i)).collect();
            fs::write(dir.join("ids.json"), serde_json::to_string_pretty(&ids)?)?;
        }
        out.push(rec);
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// timing

fn time_repeats(warmup: usize, repeats: usize, mut f: impl FnMut()) -> (f64, f64) {
    for _ in 0..warmup {
        f();
    }
    let times: Vec<f64> = (0..repeats)
        .map(|_| {
            let t = Instant::now();
            f();
            t.elapsed().as_secs_f64()
        })
        .collect();
    let mean = times.iter().sum::<f64>() / repeats as f64;
    let var = if repeats > 1 {
        times.iter().map(|t| (t - mean) * (t - mean)).sum::<f64>() / (repeats - 1) as f64
    } else {
        0.0
    };
    (mean, var.sqrt())
}

/// Random MC operand with nonoverlapping components of random sign.
fn bench_operand(shape: Vec<usize>, nc: usize, p: Precision, rng: &mut ChaCha8Rng) -> Result<McTensor> {
    let n: usize = shape.iter().product();
    let mut data = Vec::with_capacity(n * nc);
    for _ in 0..n {
        let sign = if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
        data.extend(oracle::sample_expansion(0, nc, p, rng).into_iter().map(|c| sign * c));
    }
    McTensor::from_components(shape, nc, p, data)
}

fn bench_vector(shape: Vec<usize>, p: Precision, rng: &mut ChaCha8Rng) -> Result<Tensor> {
    let n: usize = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| p.round(rng.sample(StandardNormal))).collect())
}

/// Times one operator, plain when `nc` is `None`. Plain operators are
/// repeated 100 times as often since each call is far shorter.
pub fn bench_op(op: BenchOp, nc: Option<usize>, p: Precision, cfg: &RunConfig) -> Result<BenchRow> {
    let mut rng = stream(cfg.seed, 10 + op as u64);
    let (xs, ws): (Vec<usize>, Vec<usize>) = match op {
        BenchOp::Dot => (vec![5000], vec![5000]),
        BenchOp::Mv => (vec![5000, 500], vec![500]),
        BenchOp::Matmul => (vec![500, 200], vec![200, 50]),
    };
    let x = bench_operand(xs, nc.unwrap_or(1), p, &mut rng)?;
    let w = bench_vector(ws, p, &mut rng)?;
    let plan = cfg.plan;
    let (repeats, (mean, sd)) = match nc {
        Some(_) => {
            let f = || {
                let r = match op {
                    BenchOp::Dot => linalg::dot_mcn_with(&x, &w, &plan),
                    BenchOp::Mv => linalg::mv_mcn_with(&x, &w, &plan),
                    BenchOp::Matmul => linalg::mm_mcn_with(&x, &w, &plan),
                };
                black_box(r.expect("shapes checked"));
            };
            (cfg.repeats, time_repeats(cfg.warmup, cfg.repeats, f))
        }
        None => {
            // plain operations run on the hardware type where one exists
            let xa = x.approx();
            let wm = if op == BenchOp::Mv { w.clone().reshape(vec![500, 1])? } else { w.clone() };
            let (m, k) = xa.dims2().unwrap_or((1, xa.numel()));
            let dims = (m, k, wm.numel() / k);
            let r = cfg.repeats * 100;
            let timing = match p {
                Precision::B32 => {
                    let a: Vec<f32> = xa.data().iter().map(|&v| v as f32).collect();
                    let b: Vec<f32> = wm.data().iter().map(|&v| v as f32).collect();
                    time_repeats(cfg.warmup, r, || {
                        black_box(linalg::native_matmul(&a, &b, dims));
                    })
                }
                Precision::B64 => time_repeats(cfg.warmup, r, || {
                    black_box(linalg::native_matmul(xa.data(), wm.data(), dims));
                }),
                Precision::B16 => time_repeats(cfg.warmup, r, || match op {
                    BenchOp::Dot => {
                        black_box(linalg::plain_dot(p, xa.data(), w.data()));
                    }
                    _ => {
                        black_box(linalg::plain_matmul(p, &xa, &wm).expect("shapes checked"));
                    }
                }),
            };
            (r, timing)
        }
    };
    Ok(BenchRow { op, sizes: op.sizes().to_string(), nc, repeats, mean_seconds: mean, sd_seconds: sd })
}

fn bench(cfg: &RunConfig) -> Result<Vec<BenchRow>> {
    let mut out = Vec::new();
    for op in BenchOp::ALL {
        out.push(bench_op(op, None, cfg.precision, cfg)?);
        for &nc in &cfg.nc {
            out.push(bench_op(op, Some(nc), cfg.precision, cfg)?);
        }
    }
    Ok(out)
}
