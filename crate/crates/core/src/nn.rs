//! Layers with MC parameters, MC activations, losses and checkpoints.
//!
//! Layer inputs and targets are standard tensors; parameters and layer
//! outputs are MC tensors. Constructing a layer takes the same arguments as
//! its standard counterpart plus a component count. With `nc = 1` every
//! layer reproduces plain working-precision arithmetic bit for bit.

use std::fs;
use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, Normal, Uniform};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Gradients, Tape, Var};
use crate::error::{Error, Result};
use crate::linalg::{self, wide_matmul, ReductionPlan};
use crate::mct::{self, McTensor};
use crate::precision::Precision;
use crate::tensor::Tensor;

/// Anything holding named MC parameters.
pub trait Module {
    fn named_parameters(&self) -> Vec<(String, &McTensor)>;

    fn named_parameters_mut(&mut self) -> Vec<(String, &mut McTensor)>;

    fn zero_grad(&mut self) {
        for (_, p) in self.named_parameters_mut() {
            p.zero_grad();
        }
    }

    /// Adds the gradients from a backward pass into the parameter buffers.
    fn accumulate_grads(&mut self, grads: &Gradients) -> Result<()> {
        for (_, p) in self.named_parameters_mut() {
            grads.accumulate_into(p)?;
        }
        Ok(())
    }
}

/// Uniform(-bound, bound) sampled in binary64, rounded into component 0.
fn uniform_param(
    shape: Vec<usize>,
    bound: f64,
    nc: usize,
    precision: Precision,
    rng: &mut impl Rng,
) -> Result<McTensor> {
    let n: usize = shape.iter().product();
    let dist = Uniform::new_inclusive(-bound, bound);
    let vals: Vec<f64> = (0..n).map(|_| dist.sample(rng)).collect();
    mct::from_float(&Tensor::new(shape, vals)?, nc, precision)
}

/// Column sums of an `n × m` gradient, accumulated in binary64 and rounded
/// once to `p`.
fn column_sums(p: Precision, g: &Tensor) -> Result<Tensor> {
    let (n, m) = g.dims2()?;
    let mut out = vec![0.0; m];
    for i in 0..n {
        for (j, o) in out.iter_mut().enumerate() {
            *o += g.data()[i * m + j];
        }
    }
    Ok(Tensor::from_vec(out).rounded(p))
}

/// Fully connected layer `y = x Wᵀ + b` with an MC weight (out × in).
#[derive(Clone, Debug)]
pub struct MCLinear {
    pub in_features: usize,
    pub out_features: usize,
    pub weight: McTensor,
    pub bias: Option<McTensor>,
    pub plan: ReductionPlan,
}

impl MCLinear {
    /// Uniform initialization with bound `1/sqrt(in_features)` for weight and
    /// bias; the same seed gives the same leading components for every `nc`.
    pub fn new(
        in_features: usize,
        out_features: usize,
        bias: bool,
        nc: usize,
        precision: Precision,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if in_features == 0 || out_features == 0 {
            return Err(Error::InvalidArgument("MCLinear needs nonzero dimensions".into()));
        }
        let bound = 1.0 / (in_features as f64).sqrt();
        let weight = uniform_param(vec![out_features, in_features], bound, nc, precision, rng)?;
        let bias = if bias {
            Some(uniform_param(vec![out_features], bound, nc, precision, rng)?)
        } else {
            None
        };
        Ok(MCLinear { in_features, out_features, weight, bias, plan: ReductionPlan::default() })
    }

    pub fn from_parameters(weight: McTensor, bias: Option<McTensor>) -> Result<Self> {
        let (out_features, in_features) = match weight.shape() {
            &[o, i] => (o, i),
            s => return Err(Error::InvalidArgument(format!("MCLinear weight must be 2-D, got {s:?}"))),
        };
        if let Some(b) = &bias {
            if b.shape() != [out_features] || b.nc() != weight.nc() || b.precision() != weight.precision() {
                return Err(Error::InvalidArgument(format!(
                    "bias {:?} does not match weight {:?}",
                    b.shape(),
                    weight.shape()
                )));
            }
        }
        Ok(MCLinear { in_features, out_features, weight, bias, plan: ReductionPlan::default() })
    }

    pub fn nc(&self) -> usize {
        self.weight.nc()
    }

    /// Forward pass on a `batch × in_features` standard input.
    pub fn forward(&self, tape: &Tape, x: Var) -> Result<Var> {
        let p = tape.precision();
        let xv = tape.value(x)?;
        let (_, k) = xv.dims2()?;
        if k != self.in_features {
            return Err(Error::InvalidArgument(format!(
                "MCLinear expects {} input features, got input of shape {:?}",
                self.in_features,
                xv.shape()
            )));
        }
        let w = tape.mc_param(&self.weight)?;
        let prod = linalg::matmul_mcn_with(&self.weight, &xv.transpose()?, &self.plan)?.transpose()?;
        let mut parents = vec![x, w];
        let out = match &self.bias {
            Some(b) => {
                parents.push(tape.mc_param(b)?);
                mct::add_mcn(&prod, b)?
            }
            None => prod,
        };
        let wa = self.weight.approx();
        let has_bias = self.bias.is_some();
        tape.custom_mc(
            out,
            &parents,
            Box::new(move |g| {
                let mut grads = vec![wide_matmul(p, g, &wa)?, wide_matmul(p, &g.transpose()?, &xv)?];
                if has_bias {
                    grads.push(column_sums(p, g)?);
                }
                Ok(grads)
            }),
        )
    }
}

impl Module for MCLinear {
    fn named_parameters(&self) -> Vec<(String, &McTensor)> {
        let mut v = vec![("weight".to_string(), &self.weight)];
        if let Some(b) = &self.bias {
            v.push(("bias".to_string(), b));
        }
        v
    }

    fn named_parameters_mut(&mut self) -> Vec<(String, &mut McTensor)> {
        let mut v = vec![("weight".to_string(), &mut self.weight)];
        if let Some(b) = &mut self.bias {
            v.push(("bias".to_string(), b));
        }
        v
    }
}

/// Lookup table of MC row vectors.
#[derive(Clone, Debug)]
pub struct MCEmbedding {
    pub num_embeddings: usize,
    pub dim: usize,
    pub table: McTensor,
}

impl MCEmbedding {
    /// Rows drawn from a standard normal distribution.
    pub fn new(
        num_embeddings: usize,
        dim: usize,
        nc: usize,
        precision: Precision,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let normal = Normal::new(0.0, 1.0).expect("valid normal");
        let vals = (0..num_embeddings * dim).map(|_| normal.sample(rng)).collect();
        let t = Tensor::new(vec![num_embeddings, dim], vals)?;
        Self::from_table(mct::from_float(&t, nc, precision)?)
    }

    pub fn from_table(table: McTensor) -> Result<Self> {
        match table.shape() {
            &[n, d] => Ok(MCEmbedding { num_embeddings: n, dim: d, table }),
            s => Err(Error::InvalidArgument(format!("embedding table must be 2-D, got {s:?}"))),
        }
    }

    /// Rows `idx` with all of their components; gradients scatter-add back.
    pub fn forward(&self, tape: &Tape, idx: &[usize]) -> Result<Var> {
        if let Some(&bad) = idx.iter().find(|&&i| i >= self.num_embeddings) {
            return Err(Error::InvalidArgument(format!(
                "embedding index {bad} out of range for {} rows",
                self.num_embeddings
            )));
        }
        let p = tape.precision();
        let t = tape.mc_param(&self.table)?;
        let rows = self.table.select_rows(idx)?;
        let (n, d, idx) = (self.num_embeddings, self.dim, idx.to_vec());
        tape.custom_mc(
            rows,
            &[t],
            Box::new(move |g| {
                let mut out = vec![0.0; n * d];
                for (r, &i) in idx.iter().enumerate() {
                    for k in 0..d {
                        out[i * d + k] += g.data()[r * d + k];
                    }
                }
                Ok(vec![Tensor::new(vec![n, d], out)?.rounded(p)])
            }),
        )
    }
}

impl Module for MCEmbedding {
    fn named_parameters(&self) -> Vec<(String, &McTensor)> {
        vec![("table".to_string(), &self.table)]
    }

    fn named_parameters_mut(&mut self) -> Vec<(String, &mut McTensor)> {
        vec![("table".to_string(), &mut self.table)]
    }
}

fn mc_input(tape: &Tape, x: Var, op: &str) -> Result<McTensor> {
    tape.mc_value(x)?
        .ok_or_else(|| Error::InvalidArgument(format!("{op} needs an MC-valued input")))
}

/// Zeroes every component where the evaluated sum is not positive.
pub fn mc_relu(tape: &Tape, x: Var) -> Result<Var> {
    let m = mc_input(tape, x, "mc_relu")?;
    let mask = mct::positive_mask(&m);
    let nc = m.nc();
    let data = m
        .data()
        .chunks_exact(nc)
        .zip(&mask)
        .flat_map(|(e, &keep)| e.iter().map(move |&c| if keep { c } else { 0.0 }))
        .collect();
    let out = McTensor::from_components(m.shape().to_vec(), nc, m.precision(), data)?;
    tape.custom_mc(
        out,
        &[x],
        Box::new(move |g| {
            let d = g.data().iter().zip(&mask).map(|(&v, &k)| if k { v } else { 0.0 });
            Ok(vec![Tensor::new(g.shape().to_vec(), d.collect())?])
        }),
    )
}

/// Softmax over the last axis of a 1-D or 2-D MC input, computed in MCF.
///
/// Each row is shifted by the maximum of its evaluated sums (added with
/// `grow_expn`), exponentiated with `exp_mcn`, summed with `add_mcn` and
/// normalized with `div_mcn`.
pub fn mc_softmax(tape: &Tape, x: Var) -> Result<Var> {
    let m = mc_input(tape, x, "mc_softmax")?;
    let shape = m.shape().to_vec();
    let (rows, c) = match shape.as_slice() {
        &[c] => (1, c),
        &[r, c] => (r, c),
        s => return Err(Error::InvalidArgument(format!("mc_softmax needs rank 1 or 2, got {s:?}"))),
    };
    let p = m.precision();
    let m2 = m.reshape(vec![rows, c])?;
    let a = m2.approx();
    let shift: Vec<f64> = (0..rows)
        .flat_map(|i| {
            let mx = a.row(i).iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            std::iter::repeat(-mx).take(c)
        })
        .collect();
    let shifted = mct::grow_expn(&m2, &Tensor::new(vec![rows, c], shift)?)?;
    let e = mct::exp_mcn(&shifted);
    let mut sums = Vec::with_capacity(rows);
    for i in 0..rows {
        let mut acc = e.select_rows(&[i])?.reshape(vec![c])?.select_rows(&[0])?;
        for j in 1..c {
            let next = e.select_rows(&[i])?.reshape(vec![c])?.select_rows(&[j])?;
            acc = mct::add_mcn(&acc, &next)?;
        }
        sums.push(acc);
    }
    let nc = m.nc();
    let sum_data: Vec<f64> = sums.iter().flat_map(|s| s.data().to_vec()).collect();
    let sums = McTensor::from_components(vec![rows, 1], nc, p, sum_data)?;
    let y = mct::div_mcn(&e, &sums)?.reshape(shape.clone())?;
    let ya = y.approx();
    tape.custom_mc(
        y,
        &[x],
        Box::new(move |g| {
            let mut out = vec![0.0; rows * c];
            for i in 0..rows {
                let dot: f64 = (0..c).map(|j| g.data()[i * c + j] * ya.data()[i * c + j]).sum();
                for j in 0..c {
                    let k = i * c + j;
                    out[k] = p.round(ya.data()[k] * (g.data()[k] - dot));
                }
            }
            Ok(vec![Tensor::new(shape.clone(), out)?])
        }),
    )
}

/// GELU (tanh approximation) applied to evaluated sums.
pub fn mc_gelu(tape: &Tape, x: Var) -> Result<Var> {
    tape.gelu(x)
}

pub fn mse(tape: &Tape, pred: Var, target: &Tensor) -> Result<Var> {
    tape.mse(pred, target)
}

pub fn bce(tape: &Tape, prob: Var, target: &Tensor) -> Result<Var> {
    tape.bce(prob, target)
}

pub fn cross_entropy(tape: &Tape, logits: Var, labels: &[usize]) -> Result<Var> {
    tape.cross_entropy(logits, labels)
}

/// Standard activation between layers.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    Gelu,
    Sigmoid,
    Tanh,
}

#[derive(Clone, Debug)]
pub enum Layer {
    Linear(MCLinear),
    Activation(Activation),
}

/// Ordered stack of layers. MC layer outputs enter the next layer as
/// evaluated sums.
#[derive(Clone, Debug, Default)]
pub struct MCSequential {
    pub layers: Vec<Layer>,
}

impl MCSequential {
    pub fn new(layers: Vec<Layer>) -> Result<Self> {
        let mut width: Option<usize> = None;
        for l in &layers {
            if let Layer::Linear(lin) = l {
                if let Some(w) = width {
                    if w != lin.in_features {
                        return Err(Error::InvalidArgument(format!(
                            "layer expects {} inputs but the previous layer produces {w}",
                            lin.in_features
                        )));
                    }
                }
                width = Some(lin.out_features);
            }
        }
        Ok(MCSequential { layers })
    }

    /// Linear layers of the given widths with `act` between them.
    pub fn mlp(
        widths: &[usize],
        act: Activation,
        nc: usize,
        precision: Precision,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let mut layers = Vec::new();
        for (i, w) in widths.windows(2).enumerate() {
            if i > 0 {
                layers.push(Layer::Activation(act));
            }
            layers.push(Layer::Linear(MCLinear::new(w[0], w[1], true, nc, precision, rng)?));
        }
        Self::new(layers)
    }

    pub fn set_plan(&mut self, plan: ReductionPlan) {
        for l in &mut self.layers {
            if let Layer::Linear(lin) = l {
                lin.plan = plan;
            }
        }
    }

    pub fn forward(&self, tape: &Tape, x: Var) -> Result<Var> {
        let mut h = x;
        for l in &self.layers {
            h = match l {
                Layer::Linear(lin) => lin.forward(tape, h)?,
                Layer::Activation(Activation::Relu) => tape.relu(h)?,
                Layer::Activation(Activation::Gelu) => tape.gelu(h)?,
                Layer::Activation(Activation::Sigmoid) => tape.sigmoid(h)?,
                Layer::Activation(Activation::Tanh) => tape.tanh(h)?,
            };
        }
        Ok(h)
    }
}

impl Module for MCSequential {
    fn named_parameters(&self) -> Vec<(String, &McTensor)> {
        let mut out = Vec::new();
        for (i, l) in self.layers.iter().enumerate() {
            if let Layer::Linear(lin) = l {
                out.extend(lin.named_parameters().into_iter().map(|(n, p)| (format!("{i}.{n}"), p)));
            }
        }
        out
    }

    fn named_parameters_mut(&mut self) -> Vec<(String, &mut McTensor)> {
        let mut out = Vec::new();
        for (i, l) in self.layers.iter_mut().enumerate() {
            if let Layer::Linear(lin) = l {
                out.extend(lin.named_parameters_mut().into_iter().map(|(n, p)| (format!("{i}.{n}"), p)));
            }
        }
        out
    }
}

#[derive(Serialize, Deserialize, Debug, Clone, PartialEq)]
#[serde(tag = "type", rename_all = "snake_case")]
enum LayerSpec {
    Linear { in_features: usize, out_features: usize, bias: bool },
    Activation { kind: Activation },
}

#[derive(Serialize, Deserialize, Debug, Clone, PartialEq)]
struct Manifest {
    format: String,
    version: u32,
    layers: Vec<LayerSpec>,
    parameters: Vec<(String, String)>,
}

const MANIFEST: &str = "manifest.json";
const CHECKPOINT_FORMAT: &str = "mcfloat-checkpoint";

/// Writes one blob per parameter plus a JSON manifest into `dir`.
pub fn save_checkpoint(model: &MCSequential, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    let layers = model
        .layers
        .iter()
        .map(|l| match l {
            Layer::Linear(lin) => LayerSpec::Linear {
                in_features: lin.in_features,
                out_features: lin.out_features,
                bias: lin.bias.is_some(),
            },
            Layer::Activation(kind) => LayerSpec::Activation { kind: *kind },
        })
        .collect();
    let mut parameters = Vec::new();
    for (name, p) in model.named_parameters() {
        let file = format!("{name}.mct");
        fs::write(dir.join(&file), p.to_bytes())?;
        parameters.push((name, file));
    }
    let manifest = Manifest { format: CHECKPOINT_FORMAT.into(), version: 1, layers, parameters };
    fs::write(dir.join(MANIFEST), serde_json::to_string_pretty(&manifest)?)?;
    Ok(())
}

/// Reads a checkpoint written by [`save_checkpoint`].
pub fn load_checkpoint(dir: &Path) -> Result<MCSequential> {
    let manifest: Manifest = serde_json::from_str(&fs::read_to_string(dir.join(MANIFEST))?)?;
    if manifest.format != CHECKPOINT_FORMAT || manifest.version != 1 {
        return Err(Error::Format(format!(
            "unsupported checkpoint {} v{}",
            manifest.format, manifest.version
        )));
    }
    let load = |name: &str| -> Result<McTensor> {
        let file = manifest
            .parameters
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, f)| f)
            .ok_or_else(|| Error::Format(format!("checkpoint is missing parameter {name}")))?;
        McTensor::from_bytes(&fs::read(dir.join(file))?)
    };
    let mut layers = Vec::new();
    for (i, spec) in manifest.layers.iter().enumerate() {
        layers.push(match spec {
            LayerSpec::Linear { in_features, out_features, bias } => {
                let weight = load(&format!("{i}.weight"))?;
                let b = if *bias { Some(load(&format!("{i}.bias"))?) } else { None };
                let lin = MCLinear::from_parameters(weight, b)?;
                if lin.in_features != *in_features || lin.out_features != *out_features {
                    return Err(Error::Format(format!("layer {i} shape disagrees with manifest")));
                }
                Layer::Linear(lin)
            }
            LayerSpec::Activation { kind } => Layer::Activation(*kind),
        });
    }
    MCSequential::new(layers)
}
