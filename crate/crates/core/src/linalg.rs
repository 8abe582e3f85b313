//! Matrix-level MCF operators: an MC operand times a standard operand.
//!
//! Every output element is a reduction of `scaling_n` terms combined with
//! `add_mcn`. For `nc >= 2` the terms and the running accumulator keep one
//! spare component (the expanded scaling output) and each output element is
//! renormalized to `nc` once at the end. With `nc == 1` no spare component is
//! kept, so a sequential reduction is exactly plain left-to-right
//! working-precision arithmetic.

use std::thread;

use smallvec::smallvec;

use crate::error::{Error, Result};
use crate::mct::kernels::{self, Terms};
use crate::mct::{self, McTensor};
use crate::precision::{Format, Precision};
use crate::tensor::{broadcast_shapes, Tensor};
use crate::with_format;

/// Order in which the terms of a reduction are combined.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    /// Left to right, carrying the error forward term by term.
    #[default]
    Sequential,
    /// Leaves of `leaf_arity` terms summed sequentially, then combined in a
    /// balanced binary tree.
    PairwiseTree,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct ReductionPlan {
    pub strategy: Strategy,
    pub leaf_arity: usize,
    /// Worker threads used across output elements; results do not depend on it.
    pub threads: usize,
}

impl Default for ReductionPlan {
    fn default() -> Self {
        ReductionPlan { strategy: Strategy::Sequential, leaf_arity: 1, threads: 1 }
    }
}

impl ReductionPlan {
    pub fn sequential() -> Self {
        Self::default()
    }

    pub fn pairwise() -> Self {
        ReductionPlan { strategy: Strategy::PairwiseTree, ..Self::default() }
    }

    pub fn with_threads(mut self, threads: usize) -> Self {
        self.threads = threads.max(1);
        self
    }

    /// Number of combining levels above the leaves for `n` summands.
    pub fn depth(&self, n: usize) -> usize {
        match self.strategy {
            Strategy::Sequential => n.saturating_sub(1),
            Strategy::PairwiseTree => {
                let leaves = n.div_ceil(self.leaf_arity.max(1));
                leaves.next_power_of_two().trailing_zeros() as usize
            }
        }
    }
}

/// Width of terms and accumulators during a reduction.
fn work_width(nc: usize) -> usize {
    if nc == 1 {
        1
    } else {
        nc + 1
    }
}

/// Reduces `n` scaled terms `x(i) * v(i)` into `out` (length `nc`).
fn reduce<'a, F: Format>(
    plan: &ReductionPlan,
    n: usize,
    x: impl Fn(usize) -> &'a [f64],
    v: impl Fn(usize) -> f64,
    out: &mut [f64],
) {
    let nc = out.len();
    let w = work_width(nc);
    if n == 0 {
        out.fill(0.0);
        return;
    }
    if nc == 1 {
        // one component: each step is a single correctly rounded operation
        let term = |i: usize| F::round(x(i)[0] * F::round(v(i)));
        let run = |lo: usize, hi: usize| (lo + 1..hi).fold(term(lo), |acc, i| F::round(acc + term(i)));
        out[0] = match plan.strategy {
            Strategy::Sequential => run(0, n),
            Strategy::PairwiseTree => {
                let arity = plan.leaf_arity.max(1);
                let mut level: Vec<f64> = (0..n).step_by(arity).map(|lo| run(lo, (lo + arity).min(n))).collect();
                while level.len() > 1 {
                    level = level.chunks(2).map(|c| if c.len() == 2 { F::round(c[0] + c[1]) } else { c[0] }).collect();
                }
                level[0]
            }
        };
        return;
    }
    let run = |lo: usize, hi: usize| -> Terms {
        let mut acc: Terms = smallvec![0.0; w];
        let mut t: Terms = smallvec![0.0; w];
        let mut next: Terms = smallvec![0.0; w];
        kernels::scaling_n::<F>(x(lo), F::round(v(lo)), &mut acc);
        for i in lo + 1..hi {
            kernels::scaling_n::<F>(x(i), F::round(v(i)), &mut t);
            kernels::add_mcn::<F>(&acc, &t, &mut next);
            acc.copy_from_slice(&next);
        }
        acc
    };
    let acc = match plan.strategy {
        Strategy::Sequential => run(0, n),
        Strategy::PairwiseTree => {
            let arity = plan.leaf_arity.max(1);
            let mut level: Vec<Terms> =
                (0..n).step_by(arity).map(|lo| run(lo, (lo + arity).min(n))).collect();
            while level.len() > 1 {
                level = level
                    .chunks(2)
                    .map(|pair| match pair {
                        [a, b] => {
                            let mut s: Terms = smallvec![0.0; w];
                            kernels::add_mcn::<F>(a, b, &mut s);
                            s
                        }
                        [a] => a.clone(),
                        _ => unreachable!(),
                    })
                    .collect();
            }
            level.pop().expect("at least one leaf")
        }
    };
    if w == nc {
        out.copy_from_slice(&acc);
    } else {
        let mut acc = acc;
        kernels::renormalize::<F>(&mut acc, out);
    }
}

/// Fills `out` (`count` elements of `nc` components) in parallel chunks.
fn fill_elements(
    out: &mut [f64],
    nc: usize,
    threads: usize,
    f: impl Fn(usize, &mut [f64]) + Sync,
) {
    let count = out.len() / nc.max(1);
    if threads <= 1 || count < 2 {
        for (i, o) in out.chunks_exact_mut(nc).enumerate() {
            f(i, o);
        }
        return;
    }
    let per = count.div_ceil(threads);
    thread::scope(|s| {
        for (c, chunk) in out.chunks_mut(per * nc).enumerate() {
            let f = &f;
            s.spawn(move || {
                for (j, o) in chunk.chunks_exact_mut(nc).enumerate() {
                    f(c * per + j, o);
                }
            });
        }
    });
}

fn expect_rank(op: &str, what: &str, shape: &[usize], rank: usize) -> Result<()> {
    if shape.len() == rank {
        Ok(())
    } else {
        Err(Error::InvalidArgument(format!(
            "{op}: {what} must have rank {rank}, got shape {shape:?}"
        )))
    }
}

fn mismatch(op: &str, a: &[usize], b: &[usize]) -> Error {
    Error::InvalidArgument(format!("{op}: incompatible shapes {a:?} and {b:?}"))
}

/// Batched product over flattened batch indices: `x` batch `bx(i)` (m×k)
/// times `w` batch `bw(i)` (k×n) for each output batch `i`.
#[allow(clippy::too_many_arguments)]
fn batched(
    x: &McTensor,
    w: &Tensor,
    out_shape: Vec<usize>,
    batches: usize,
    bx: &(dyn Fn(usize) -> usize + Sync),
    bw: &(dyn Fn(usize) -> usize + Sync),
    (m, k, n): (usize, usize, usize),
    plan: &ReductionPlan,
) -> McTensor {
    let nc = x.nc();
    let p = x.precision();
    let mut data = vec![0.0; batches * m * n * nc];
    let wd = w.data();
    with_format!(p, F => fill_elements(&mut data, nc, plan.threads, |e, o| {
        let (b, rest) = (e / (m * n), e % (m * n));
        let (i, j) = (rest / n, rest % n);
        let xb = bx(b) * m * k + i * k;
        let wb = bw(b) * k * n + j;
        reduce::<F>(plan, k, |l| x.element(xb + l), |l| wd[wb + l * n], o);
    }));
    McTensor::from_components(out_shape, nc, p, data).expect("kernel output is on the grid")
}

/// Dot product of an MC vector and a standard vector.
pub fn dot_mcn(x: &McTensor, v: &Tensor) -> Result<McTensor> {
    dot_mcn_with(x, v, &ReductionPlan::default())
}

pub fn dot_mcn_with(x: &McTensor, v: &Tensor, plan: &ReductionPlan) -> Result<McTensor> {
    expect_rank("dot_mcn", "x", x.shape(), 1)?;
    expect_rank("dot_mcn", "v", v.shape(), 1)?;
    if x.shape() != v.shape() {
        return Err(mismatch("dot_mcn", x.shape(), v.shape()));
    }
    let k = v.numel();
    let out = batched(x, v, vec![], 1, &|_| 0, &|_| 0, (1, k, 1), plan);
    Ok(out)
}

/// Matrix (m×k) times vector (k).
pub fn mv_mcn(x: &McTensor, v: &Tensor) -> Result<McTensor> {
    mv_mcn_with(x, v, &ReductionPlan::default())
}

pub fn mv_mcn_with(x: &McTensor, v: &Tensor, plan: &ReductionPlan) -> Result<McTensor> {
    expect_rank("mv_mcn", "x", x.shape(), 2)?;
    expect_rank("mv_mcn", "v", v.shape(), 1)?;
    let (m, k) = (x.shape()[0], x.shape()[1]);
    if v.numel() != k {
        return Err(mismatch("mv_mcn", x.shape(), v.shape()));
    }
    Ok(batched(x, v, vec![m], 1, &|_| 0, &|_| 0, (m, k, 1), plan))
}

/// Matrix (m×k) times matrix (k×n).
pub fn mm_mcn(x: &McTensor, w: &Tensor) -> Result<McTensor> {
    mm_mcn_with(x, w, &ReductionPlan::default())
}

pub fn mm_mcn_with(x: &McTensor, w: &Tensor, plan: &ReductionPlan) -> Result<McTensor> {
    expect_rank("mm_mcn", "x", x.shape(), 2)?;
    expect_rank("mm_mcn", "w", w.shape(), 2)?;
    let (m, k) = (x.shape()[0], x.shape()[1]);
    let (k2, n) = (w.shape()[0], w.shape()[1]);
    if k != k2 {
        return Err(mismatch("mm_mcn", x.shape(), w.shape()));
    }
    Ok(batched(x, w, vec![m, n], 1, &|_| 0, &|_| 0, (m, k, n), plan))
}

/// Batched product (b×m×k) times (b×k×n).
pub fn bmm_mcn(x: &McTensor, w: &Tensor) -> Result<McTensor> {
    bmm_mcn_with(x, w, &ReductionPlan::default())
}

pub fn bmm_mcn_with(x: &McTensor, w: &Tensor, plan: &ReductionPlan) -> Result<McTensor> {
    expect_rank("bmm_mcn", "x", x.shape(), 3)?;
    expect_rank("bmm_mcn", "w", w.shape(), 3)?;
    let (b, m, k) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let (b2, k2, n) = (w.shape()[0], w.shape()[1], w.shape()[2]);
    if b != b2 || k != k2 {
        return Err(mismatch("bmm_mcn", x.shape(), w.shape()));
    }
    Ok(batched(x, w, vec![b, m, n], b, &|i| i, &|i| i, (m, k, n), plan))
}

/// Batched over two leading dimensions: (a×b×m×k) times (a×b×k×n).
pub fn mm4d_mcn(x: &McTensor, w: &Tensor) -> Result<McTensor> {
    mm4d_mcn_with(x, w, &ReductionPlan::default())
}

pub fn mm4d_mcn_with(x: &McTensor, w: &Tensor, plan: &ReductionPlan) -> Result<McTensor> {
    expect_rank("mm4d_mcn", "x", x.shape(), 4)?;
    expect_rank("mm4d_mcn", "w", w.shape(), 4)?;
    let (xs, ws) = (x.shape(), w.shape());
    if xs[..2] != ws[..2] || xs[3] != ws[2] {
        return Err(mismatch("mm4d_mcn", xs, ws));
    }
    let (m, k, n) = (xs[2], xs[3], ws[3]);
    let batches = xs[0] * xs[1];
    let shape = vec![xs[0], xs[1], m, n];
    Ok(batched(x, w, shape, batches, &|i| i, &|i| i, (m, k, n), plan))
}

/// `beta * bias + alpha * (x @ w)`, with both scalar multiplies done by
/// `scaling_n` and the sum by `add_mcn`. `bias` broadcasts to the product.
pub fn addmm_mcn(
    bias: &McTensor,
    x: &McTensor,
    w: &Tensor,
    alpha: f64,
    beta: f64,
) -> Result<McTensor> {
    addmm_mcn_with(bias, x, w, alpha, beta, &ReductionPlan::default())
}

pub fn addmm_mcn_with(
    bias: &McTensor,
    x: &McTensor,
    w: &Tensor,
    alpha: f64,
    beta: f64,
    plan: &ReductionPlan,
) -> Result<McTensor> {
    let prod = mm_mcn_with(x, w, plan)?;
    let prod = mct::scaling_n(&prod, &Tensor::scalar(alpha), false)?;
    let bias = mct::scaling_n(bias, &Tensor::scalar(beta), false)?;
    mct::add_mcn(&bias, &prod)
}

/// General product following the usual matmul rank rules: vectors are
/// promoted and squeezed, leading dimensions broadcast.
pub fn matmul_mcn(x: &McTensor, w: &Tensor) -> Result<McTensor> {
    matmul_mcn_with(x, w, &ReductionPlan::default())
}

pub fn matmul_mcn_with(x: &McTensor, w: &Tensor, plan: &ReductionPlan) -> Result<McTensor> {
    let (xs, ws) = (x.shape().to_vec(), w.shape().to_vec());
    match (xs.len(), ws.len()) {
        (0, _) | (_, 0) => Err(Error::InvalidArgument(format!(
            "matmul_mcn: scalar operands are not matrices ({xs:?} and {ws:?})"
        ))),
        (1, 1) => dot_mcn_with(x, w, plan).map_err(|_| mismatch("matmul_mcn", &xs, &ws)),
        (2, 1) => mv_mcn_with(x, w, plan).map_err(|_| mismatch("matmul_mcn", &xs, &ws)),
        (2, 2) => mm_mcn_with(x, w, plan).map_err(|_| mismatch("matmul_mcn", &xs, &ws)),
        (3, 3) if xs[0] == ws[0] => {
            bmm_mcn_with(x, w, plan).map_err(|_| mismatch("matmul_mcn", &xs, &ws))
        }
        (4, 4) if xs[..2] == ws[..2] => {
            mm4d_mcn_with(x, w, plan).map_err(|_| mismatch("matmul_mcn", &xs, &ws))
        }
        (1, _) => {
            // (k) @ (..., k, n): prepend a unit row, then drop it
            let row = x.reshape(vec![1, xs[0]])?;
            let out = matmul_mcn_with(&row, w, plan)?;
            let mut shape = out.shape().to_vec();
            shape.remove(shape.len() - 2);
            out.reshape(shape)
        }
        (_, 1) => {
            // (..., m, k) @ (k): append a unit column, then drop it
            let col = w.clone().reshape(vec![ws[0], 1])?;
            let out = matmul_mcn_with(x, &col, plan)?;
            let mut shape = out.shape().to_vec();
            shape.pop();
            out.reshape(shape)
        }
        _ => broadcast_matmul(x, w, plan),
    }
}

/// Row-major strides of `shape`.
fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

/// Flat index into a batch of shape `own` (right-aligned, size-1 dims
/// broadcast) for output batch index `i` of shape `out`.
fn batch_index(i: usize, out: &[usize], own: &[usize]) -> usize {
    let out_strides = strides(out);
    let own_strides = strides(own);
    let offset = out.len() - own.len();
    let mut idx = 0;
    for (d, &os) in out_strides.iter().enumerate() {
        let coord = (i / os) % out[d];
        if d >= offset && own[d - offset] != 1 {
            idx += coord * own_strides[d - offset];
        }
    }
    idx
}

fn broadcast_matmul(x: &McTensor, w: &Tensor, plan: &ReductionPlan) -> Result<McTensor> {
    let (xs, ws) = (x.shape(), w.shape());
    let (m, k) = (xs[xs.len() - 2], xs[xs.len() - 1]);
    let (k2, n) = (ws[ws.len() - 2], ws[ws.len() - 1]);
    let (xb, wb) = (&xs[..xs.len() - 2], &ws[..ws.len() - 2]);
    let batch = broadcast_shapes(xb, wb).ok_or_else(|| mismatch("matmul_mcn", xs, ws))?;
    if k != k2 {
        return Err(mismatch("matmul_mcn", xs, ws));
    }
    let count = batch.iter().product();
    let mut shape = batch.clone();
    shape.extend([m, n]);
    let (bx, bw) = (xb.to_vec(), wb.to_vec());
    Ok(batched(
        x,
        w,
        shape,
        count,
        &|i| batch_index(i, &batch, &bx),
        &|i| batch_index(i, &batch, &bw),
        (m, k, n),
        plan,
    ))
}

/// Either kind of matrix operand.
#[derive(Clone, Copy, Debug)]
pub enum Operand<'a> {
    Mc(&'a McTensor),
    Std(&'a Tensor),
}

/// Matrix product of any operand pair involving at least one MC tensor.
///
/// A standard left operand is handled through transposes, so it is limited
/// to rank 2. Products of two MC tensors are rejected.
pub fn matmul(a: Operand<'_>, b: Operand<'_>) -> Result<McTensor> {
    match (a, b) {
        (Operand::Mc(x), Operand::Std(w)) => matmul_mcn(x, w),
        (Operand::Std(v), Operand::Mc(y)) => {
            if v.rank() != 2 || y.rank() != 2 {
                return Err(Error::Unsupported(format!(
                    "standard × MC product needs rank-2 operands, got {:?} and {:?}",
                    v.shape(),
                    y.shape()
                )));
            }
            mm_mcn(&y.transpose()?, &v.transpose()?)?.transpose()
        }
        (Operand::Mc(x), Operand::Mc(y)) => Err(Error::Unsupported(format!(
            "MC × MC matrix product ({:?} × {:?}); convert one operand to a standard tensor",
            x.shape(),
            y.shape()
        ))),
        (Operand::Std(_), Operand::Std(_)) => Err(Error::InvalidArgument(
            "matmul: at least one operand must be an MC tensor; use plain_matmul".into(),
        )),
    }
}

/// Working-precision matrix product (m×k)·(k×n) with every multiply and add
/// rounded to `precision`, accumulated left to right.
pub fn plain_matmul(precision: Precision, a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, k) = a.dims2()?;
    let (k2, n) = b.dims2()?;
    if k != k2 {
        return Err(mismatch("plain_matmul", a.shape(), b.shape()));
    }
    let (ad, bd) = (a.data(), b.data());
    let mut out = vec![0.0; m * n];
    with_format!(precision, F => {
        for i in 0..m {
            for j in 0..n {
                let mut acc = 0.0;
                for l in 0..k {
                    let t = F::round(F::round(ad[i * k + l]) * F::round(bd[l * n + j]));
                    acc = if l == 0 { t } else { F::round(acc + t) };
                }
                out[i * n + j] = acc;
            }
        }
    });
    Tensor::new(vec![m, n], out)
}

/// Matrix product (m×k)·(k×n) accumulated in binary64 with each output
/// rounded once to `precision`. Used for gradient reductions, where a
/// wide accumulator is the norm for narrow formats.
pub fn wide_matmul(precision: Precision, a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, k) = a.dims2()?;
    let (k2, n) = b.dims2()?;
    if k != k2 {
        return Err(mismatch("wide_matmul", a.shape(), b.shape()));
    }
    let (ad, bd) = (a.data(), b.data());
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            let acc: f64 = (0..k).map(|l| ad[i * k + l] * bd[l * n + j]).sum();
            out[i * n + j] = precision.round(acc);
        }
    }
    Tensor::new(vec![m, n], out)
}

/// Working-precision dot product, accumulated left to right.
pub fn plain_dot(precision: Precision, a: &[f64], b: &[f64]) -> f64 {
    let mut acc = 0.0;
    for (l, (&x, &y)) in a.iter().zip(b).enumerate() {
        let t = precision.round(precision.round(x) * precision.round(y));
        acc = if l == 0 { t } else { precision.round(acc + t) };
    }
    acc
}

/// Row-major product (m×k)·(k×n) in a hardware float type, accumulated left
/// to right. For `f32` and `f64` it matches [`plain_matmul`] bit for bit;
/// it exists so timings can compare against native arithmetic.
pub fn native_matmul<T: num_traits::Float>(a: &[T], b: &[T], (m, k, n): (usize, usize, usize)) -> Vec<T> {
    let mut out = vec![T::zero(); m * n];
    for i in 0..m {
        let row = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let mut acc = row[0] * b[j];
            for l in 1..k {
                acc = acc + row[l] * b[l * n + j];
            }
            out[i * n + j] = acc;
        }
    }
    out
}
