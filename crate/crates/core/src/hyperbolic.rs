//! Graph embeddings in the upper half-space model of hyperbolic space.
//!
//! A point is a row `x ∈ R^n` with height `x_n > 0`; the metric is the
//! Euclidean one divided by `x_n²`. Distances are
//! `arcosh(1 + t)` with `t = ‖x − y‖² / (2 x_n y_n)`. The argument `t` is
//! formed entirely in MCF (`sub_mcn`, `square_mcn`, `add_mcn`, `mul_mcn`,
//! `div_mcn`); the final `arcosh` runs on its evaluated sum as
//! `log1p(t + sqrt(t (t + 2)))`, which avoids forming `1 + t` and losing
//! `t` to cancellation. For `t ≤ 1e-12` the series `sqrt(2t)` is used.

use std::collections::{BTreeSet, HashSet};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Uniform};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::data::EdgeList;
use crate::error::{Error, Result};
use crate::mct::{self, McTensor};
use crate::nn::{MCEmbedding, Module};
use crate::precision::{pow2, Precision};
use crate::tensor::Tensor;

/// Below this argument `arcosh(1 + t)` is evaluated as `sqrt(2t)`.
pub const SERIES_THRESHOLD: f64 = 1e-12;

/// `arcosh(1 + t)` for `t >= 0`.
pub fn arcosh1p(t: f64) -> f64 {
    if t <= SERIES_THRESHOLD {
        (2.0 * t.max(0.0)).sqrt()
    } else {
        (t + (t * (t + 2.0)).sqrt()).ln_1p()
    }
}

/// Smallest height a point is clamped to: the precision's smallest positive
/// value times 2^8.
pub fn height_floor(p: Precision) -> f64 {
    p.min_positive() * pow2(8)
}

/// Column `j` of a `b × n` MC matrix as a length-`b` MC vector.
fn column(x: &McTensor, j: usize) -> Result<McTensor> {
    let b = x.shape()[0];
    x.transpose()?.select_rows(&[j])?.reshape(vec![b])
}

fn row_bits(x: &McTensor, i: usize, n: usize) -> Vec<u64> {
    (0..n).flat_map(|j| x.element(i * n + j).iter().map(|c| c.to_bits())).collect()
}

/// Orders each pair of rows canonically so the result is symmetric bit for
/// bit.
fn canonical_pairs(u: &McTensor, v: &McTensor) -> Result<(McTensor, McTensor)> {
    let (b, n) = (u.shape()[0], u.shape()[1]);
    let mut a = u.clone();
    let mut c = v.clone();
    for i in 0..b {
        if row_bits(u, i, n) > row_bits(v, i, n) {
            a.set_row(i, &v.select_rows(&[i])?)?;
            c.set_row(i, &u.select_rows(&[i])?)?;
        }
    }
    Ok((a, c))
}

/// The argument `t = ‖u − v‖² / (2 u_n v_n)` for each row pair, in MCF.
pub fn distance_argument(u: &McTensor, v: &McTensor) -> Result<McTensor> {
    if u.rank() != 2 || u.shape() != v.shape() {
        return Err(Error::InvalidArgument(format!(
            "halfspace distance needs two b × n point sets, got {:?} and {:?}",
            u.shape(),
            v.shape()
        )));
    }
    let n = u.shape()[1];
    if n == 0 {
        return Err(Error::InvalidArgument("points need at least one coordinate".into()));
    }
    let (u, v) = canonical_pairs(u, v)?;
    let (un, vn) = (column(&u, n - 1)?, column(&v, n - 1)?);
    for h in [&un, &vn] {
        if h.approx().data().iter().any(|&x| !(x > 0.0)) {
            return Err(Error::Domain("halfspace points need a positive last coordinate".into()));
        }
    }
    let sq = mct::square_mcn(&mct::sub_mcn(&u, &v)?);
    let mut s = column(&sq, 0)?;
    for j in 1..n {
        s = mct::add_mcn(&s, &column(&sq, j)?)?;
    }
    let den = mct::scaling_n(&mct::mul_mcn(&un, &vn)?, &Tensor::scalar(2.0), false)?;
    mct::div_mcn(&s, &den)
}

/// Component sums of each element, evaluated in binary64.
fn evaluated(x: &McTensor) -> Vec<f64> {
    (0..x.numel()).map(|i| x.element(i).iter().rev().sum()).collect()
}

/// The argument `t` of each row pair as a binary64 value: the evaluated sum
/// of the MC argument, or, where that overflowed the working format, the
/// formula recomputed in binary64 from the evaluated coordinates.
pub fn evaluated_argument(u: &McTensor, v: &McTensor) -> Result<Vec<f64>> {
    let mut t = evaluated(&distance_argument(u, v)?);
    let n = u.shape()[1];
    let (ue, ve) = (evaluated(u), evaluated(v));
    for (i, ti) in t.iter_mut().enumerate() {
        if ti.is_finite() {
            continue;
        }
        let (x, y) = (&ue[i * n..(i + 1) * n], &ve[i * n..(i + 1) * n]);
        let s: f64 = x.iter().zip(y).map(|(a, b)| (a - b) * (a - b)).sum();
        *ti = s / (2.0 * x[n - 1] * y[n - 1]);
    }
    Ok(t)
}

/// Row-wise distances between two `b × n` point sets, rounded to their
/// working precision.
pub fn halfspace_distance(u: &McTensor, v: &McTensor) -> Result<Tensor> {
    let p = u.precision();
    let t = evaluated_argument(u, v)?;
    Ok(Tensor::from_vec(t.into_iter().map(|t| p.round(arcosh1p(t))).collect()))
}

/// Distance between two single points.
pub fn point_distance(x: &McTensor, y: &McTensor) -> Result<f64> {
    let n = x.numel();
    let d = halfspace_distance(&x.reshape(vec![1, n])?, &y.reshape(vec![1, n])?)?;
    Ok(d.data()[0])
}

/// Records row-wise distances between two MC-valued `b × n` nodes on the
/// tape. The Jacobian is evaluated at the evaluated sums of the points.
pub fn distance_on_tape(tape: &Tape, u: Var, v: Var) -> Result<Var> {
    let p = tape.precision();
    let missing = || Error::InvalidArgument("distance inputs must be MC-valued".into());
    let um = tape.mc_value(u)?.ok_or_else(missing)?;
    let vm = tape.mc_value(v)?.ok_or_else(missing)?;
    let t = evaluated_argument(&um, &vm)?;
    let d = Tensor::from_vec(t.iter().map(|&t| p.round(arcosh1p(t))).collect());
    let (ua, va) = (Tensor::new(um.shape().to_vec(), evaluated(&um))?, Tensor::new(vm.shape().to_vec(), evaluated(&vm))?);
    let (b, n) = (ua.shape()[0], ua.shape()[1]);
    tape.custom(
        d,
        None,
        &[u, v],
        Box::new(move |g| {
            let mut gu = vec![0.0; b * n];
            let mut gv = vec![0.0; b * n];
            for i in 0..b {
                let ti = t[i];
                if !(ti > 0.0 && ti.is_finite()) {
                    continue;
                }
                // d = arcosh(1 + t): dd/dt = 1 / sqrt(t (t + 2))
                let coef = g.data()[i] / (ti * (ti + 2.0)).sqrt();
                let (x, y) = (ua.row(i), va.row(i));
                let (xn, yn) = (x[n - 1], y[n - 1]);
                for j in 0..n {
                    let diff = (x[j] - y[j]) / (xn * yn);
                    let (mut dx, mut dy) = (diff, -diff);
                    if j == n - 1 {
                        dx -= ti / xn;
                        dy -= ti / yn;
                    }
                    gu[i * n + j] = p.round(coef * dx);
                    gv[i * n + j] = p.round(coef * dy);
                }
            }
            Ok(vec![Tensor::new(vec![b, n], gu)?, Tensor::new(vec![b, n], gv)?])
        }),
    )
}

/// Negative log-likelihood of each positive against its negatives:
/// `-log(exp(-d_pos) / Σ exp(-d))` over the positive and its negatives,
/// averaged over the batch.
///
/// `negatives` has `K` entries per positive pair.
pub fn reconstruction_loss(
    tape: &Tape,
    emb: &MCEmbedding,
    positives: &[(usize, usize)],
    negatives: &[usize],
) -> Result<Var> {
    let b = positives.len();
    if b == 0 || negatives.len() % b != 0 {
        return Err(Error::InvalidArgument(format!(
            "{} negatives cannot be split over {b} positives",
            negatives.len()
        )));
    }
    let k = negatives.len() / b;
    let mut left = Vec::with_capacity(b * (k + 1));
    let mut right = Vec::with_capacity(b * (k + 1));
    for (i, &(u, v)) in positives.iter().enumerate() {
        left.extend(std::iter::repeat(u).take(k + 1));
        right.push(v);
        right.extend_from_slice(&negatives[i * k..(i + 1) * k]);
    }
    let lu = emb.forward(tape, &left)?;
    let rv = emb.forward(tape, &right)?;
    let d = distance_on_tape(tape, lu, rv)?;
    let logits = tape.reshape(tape.scale(d, -1.0)?, vec![b, k + 1])?;
    tape.cross_entropy(logits, &vec![0; b])
}

/// Riemannian SGD: the Euclidean gradient of each row is scaled by the
/// squared height, the step is accumulated with `grow_expn`, and heights are
/// clamped to [`height_floor`]. Returns the number of clamped points.
pub fn rsgd_step(emb: &mut MCEmbedding, lr: f64) -> Result<usize> {
    let table = &mut emb.table;
    let p = table.precision();
    let g = table
        .grad()
        .cloned()
        .ok_or_else(|| Error::InvalidArgument("embedding has no gradient; run backward first".into()))?;
    let (rows, n) = (emb.num_embeddings, emb.dim);
    let heights = column(table, n - 1)?.approx();
    let lr = p.round(lr);
    let mut update = vec![0.0; rows * n];
    for i in 0..rows {
        let h2 = p.round(heights.data()[i] * heights.data()[i]);
        for j in 0..n {
            let rg = p.round(h2 * g.data()[i * n + j]);
            update[i * n + j] = p.round(-(lr * rg));
        }
    }
    if update.iter().all(|&u| u == 0.0) {
        return Ok(0);
    }
    let mut next = mct::grow_expn(table, &Tensor::new(vec![rows, n], update.clone())?)?;
    // rows without an update keep their exact bits
    for i in 0..rows {
        if update[i * n..(i + 1) * n].iter().all(|&u| u == 0.0) {
            next.set_row(i, &table.select_rows(&[i])?)?;
        }
    }
    let floor = height_floor(p);
    let nc = table.nc();
    let mut clamped = 0;
    let new_heights = column(&next, n - 1)?.approx();
    for i in 0..rows {
        if !(new_heights.data()[i] >= floor) {
            let mut row = next.select_rows(&[i])?;
            let mut data = row.data().to_vec();
            let k = (n - 1) * nc;
            data[k..k + nc].fill(0.0);
            data[k] = floor;
            row = McTensor::from_components(row.shape().to_vec(), nc, p, data)?;
            next.set_row(i, &row)?;
            clamped += 1;
        }
    }
    table.assign(&next)?;
    Ok(clamped)
}

/// Positive pairs for training and the neighbor sets used for evaluation.
#[derive(Clone, Debug)]
pub struct EdgeDataset {
    pub names: Vec<String>,
    /// Positive pairs (each undirected relation once).
    pub positives: Vec<(usize, usize)>,
    /// Symmetric neighbor sets.
    pub neighbors: Vec<BTreeSet<usize>>,
    pub negatives: usize,
}

impl EdgeDataset {
    /// Uses the given edges as the positive relation.
    pub fn from_edges(edges: &EdgeList, negatives: usize) -> Result<Self> {
        let n = edges.num_nodes();
        let mut neighbors = vec![BTreeSet::new(); n];
        let mut positives = Vec::new();
        let mut seen = HashSet::new();
        for &(u, v) in &edges.edges {
            if u >= n || v >= n {
                return Err(Error::InvalidArgument(format!("edge ({u}, {v}) outside 0..{n}")));
            }
            if u == v {
                continue;
            }
            let key = (u.min(v), u.max(v));
            if seen.insert(key) {
                positives.push((u, v));
                neighbors[u].insert(v);
                neighbors[v].insert(u);
            }
        }
        Ok(EdgeDataset { names: edges.names.clone(), positives, neighbors, negatives })
    }

    /// Uses the transitive closure of a directed hierarchy: every ancestor
    /// and descendant pair is a positive.
    pub fn transitive_closure(edges: &EdgeList, negatives: usize) -> Result<Self> {
        let n = edges.num_nodes();
        let mut children = vec![Vec::new(); n];
        for &(u, v) in &edges.edges {
            children[u].push(v);
        }
        let mut closure = EdgeList { names: edges.names.clone(), edges: Vec::new() };
        for root in 0..n {
            let mut stack = children[root].clone();
            let mut seen = HashSet::new();
            while let Some(x) = stack.pop() {
                if x == root || !seen.insert(x) {
                    continue;
                }
                closure.edges.push((root, x));
                stack.extend_from_slice(&children[x]);
            }
        }
        Self::from_edges(&closure, negatives)
    }

    pub fn num_nodes(&self) -> usize {
        self.names.len()
    }

    /// `k` nodes that are neither `u` nor its neighbors, drawn uniformly
    /// with replacement. Nodes related to everything get themselves.
    pub fn sample_negatives(&self, u: usize, k: usize, rng: &mut impl Rng) -> Vec<usize> {
        let n = self.num_nodes();
        let pool = n - 1 - self.neighbors[u].len();
        if pool == 0 {
            return vec![u; k];
        }
        (0..k)
            .map(|_| loop {
                let w = rng.gen_range(0..n);
                if w != u && !self.neighbors[u].contains(&w) {
                    break w;
                }
            })
            .collect()
    }
}

/// Reconstruction quality.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Reconstruction {
    pub map: f64,
    pub mean_rank: f64,
}

/// MAP and mean rank from a full distance matrix (row-major `n × n`).
///
/// For node `u` and neighbor `v`, the rank of `v` is one plus the number of
/// non-neighbors strictly closer to `u`. Average precision of `u` averages,
/// over its neighbors, the fraction of neighbors among all nodes at least as
/// close as `v`, ties counted in `v`'s favor. Non-finite distances rank as
/// infinitely far.
pub fn map_and_mean_rank(dist: &[f64], neighbors: &[BTreeSet<usize>]) -> Reconstruction {
    let n = neighbors.len();
    let far = |d: f64| if d.is_nan() { f64::INFINITY } else { d };
    let (mut ap_sum, mut ap_count) = (0.0, 0usize);
    let (mut rank_sum, mut rank_count) = (0.0, 0usize);
    for u in 0..n {
        if neighbors[u].is_empty() {
            continue;
        }
        let row = &dist[u * n..(u + 1) * n];
        let mut ap = 0.0;
        for &v in &neighbors[u] {
            let dv = far(row[v]);
            let mut closer_non = 0;
            let mut closer_all = 0;
            let mut closer_nbr = 0;
            for w in 0..n {
                if w == u || w == v || !(far(row[w]) < dv) {
                    continue;
                }
                closer_all += 1;
                if neighbors[u].contains(&w) {
                    closer_nbr += 1;
                } else {
                    closer_non += 1;
                }
            }
            rank_sum += (1 + closer_non) as f64;
            rank_count += 1;
            ap += (1 + closer_nbr) as f64 / (1 + closer_all) as f64;
        }
        ap_sum += ap / neighbors[u].len() as f64;
        ap_count += 1;
    }
    Reconstruction {
        map: if ap_count > 0 { ap_sum / ap_count as f64 } else { 0.0 },
        mean_rank: if rank_count > 0 { rank_sum / rank_count as f64 } else { 0.0 },
    }
}

/// All pairwise distances between the rows of an embedding table.
pub fn distance_matrix(table: &McTensor) -> Result<Vec<f64>> {
    let n = table.shape()[0];
    let mut left = Vec::with_capacity(n * n);
    let mut right = Vec::with_capacity(n * n);
    for i in 0..n {
        for j in 0..n {
            left.push(i);
            right.push(j);
        }
    }
    let d = halfspace_distance(&table.select_rows(&left)?, &table.select_rows(&right)?)?;
    Ok(d.into_data())
}

pub fn evaluate(emb: &MCEmbedding, data: &EdgeDataset) -> Result<Reconstruction> {
    Ok(map_and_mean_rank(&distance_matrix(&emb.table)?, &data.neighbors))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub dim: usize,
    pub nc: usize,
    pub precision: Precision,
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub negatives: usize,
    pub seed: u64,
    /// Half-width of the uniform initialization around `(0, …, 0, 1)`.
    pub init_scale: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            dim: 2,
            nc: 2,
            precision: Precision::B64,
            lr: 0.3,
            epochs: 100,
            batch_size: 16,
            negatives: 50,
            seed: 0,
            init_scale: 1e-3,
        }
    }
}

/// Per-epoch record of a training run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub loss: f64,
    pub clamped: usize,
    pub non_finite: bool,
}

/// Initial embedding: coordinates uniform in `±init_scale`, heights
/// `1 ± init_scale`.
pub fn init_embedding(n: usize, cfg: &TrainConfig, rng: &mut impl Rng) -> Result<MCEmbedding> {
    let u = Uniform::new_inclusive(-cfg.init_scale, cfg.init_scale);
    let mut vals = Vec::with_capacity(n * cfg.dim);
    for _ in 0..n {
        for j in 0..cfg.dim {
            let base = if j + 1 == cfg.dim { 1.0 } else { 0.0 };
            vals.push(base + u.sample(rng));
        }
    }
    let t = Tensor::new(vec![n, cfg.dim], vals)?;
    MCEmbedding::from_table(mct::from_float(&t, cfg.nc, cfg.precision)?)
}

/// Trains with fixed-lr RSGD over shuffled mini-batches of positives.
pub fn train(
    data: &EdgeDataset,
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochStats),
) -> Result<(MCEmbedding, Vec<EpochStats>)> {
    if cfg.dim < 1 || cfg.batch_size == 0 {
        return Err(Error::InvalidArgument("dim and batch size must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut emb = init_embedding(data.num_nodes(), cfg, &mut rng)?;
    let mut order: Vec<usize> = (0..data.positives.len()).collect();
    let mut history = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        rand::seq::SliceRandom::shuffle(order.as_mut_slice(), &mut rng);
        let (mut total, mut batches, mut clamped) = (0.0, 0usize, 0usize);
        for chunk in order.chunks(cfg.batch_size) {
            // both directions so each endpoint is anchored in turn
            let pos: Vec<(usize, usize)> = chunk
                .iter()
                .map(|&i| {
                    let (u, v) = data.positives[i];
                    if rng.gen_bool(0.5) { (u, v) } else { (v, u) }
                })
                .collect();
            let negs: Vec<usize> = pos
                .iter()
                .flat_map(|&(u, _)| data.sample_negatives(u, cfg.negatives, &mut rng))
                .collect();
            let tape = Tape::new(cfg.precision);
            let loss = reconstruction_loss(&tape, &emb, &pos, &negs)?;
            let grads = tape.backward(loss)?;
            emb.zero_grad();
            emb.accumulate_grads(&grads)?;
            clamped += rsgd_step(&mut emb, cfg.lr)?;
            total += tape.value(loss)?.data()[0];
            batches += 1;
        }
        let stats = EpochStats {
            epoch,
            loss: total / batches.max(1) as f64,
            clamped,
            non_finite: emb.table.has_non_finite(),
        };
        on_epoch(&stats);
        history.push(stats);
    }
    Ok((emb, history))
}
