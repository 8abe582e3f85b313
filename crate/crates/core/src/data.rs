//! Dataset ingestion: numeric CSV tables and TSV edge lists.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Feature matrix with one label per row.
#[derive(Clone, Debug, PartialEq)]
pub struct Table {
    pub features: Tensor,
    pub labels: Vec<f64>,
}

impl Table {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn num_features(&self) -> usize {
        self.features.shape()[1]
    }

    pub fn select(&self, idx: &[usize]) -> Result<Table> {
        Ok(Table {
            features: self.features.select_rows(idx)?,
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
        })
    }

    /// Shuffled split; the first part holds `round(frac * len)` rows.
    pub fn split(&self, frac: f64, rng: &mut impl Rng) -> Result<(Table, Table)> {
        let mut idx: Vec<usize> = (0..self.len()).collect();
        idx.shuffle(rng);
        let cut = ((self.len() as f64) * frac).round() as usize;
        Ok((self.select(&idx[..cut])?, self.select(&idx[cut..])?))
    }

    /// Per-column mean and standard deviation (population form).
    pub fn column_stats(&self) -> (Vec<f64>, Vec<f64>) {
        let (n, d) = (self.len() as f64, self.num_features());
        let mut mean = vec![0.0; d];
        let mut var = vec![0.0; d];
        for i in 0..self.len() {
            for (j, m) in mean.iter_mut().enumerate() {
                *m += self.features.data()[i * d + j] / n;
            }
        }
        for i in 0..self.len() {
            for (j, v) in var.iter_mut().enumerate() {
                let c = self.features.data()[i * d + j] - mean[j];
                *v += c * c / n;
            }
        }
        (mean, var.into_iter().map(f64::sqrt).collect())
    }

    /// Applies `(x - mean) / std` per column; constant columns are centered only.
    pub fn standardized(&self, mean: &[f64], std: &[f64]) -> Table {
        let d = self.num_features();
        let data = self
            .features
            .data()
            .iter()
            .enumerate()
            .map(|(k, &x)| {
                let j = k % d;
                let s = if std[j] > 0.0 { std[j] } else { 1.0 };
                (x - mean[j]) / s
            })
            .collect();
        Table {
            features: Tensor::new(self.features.shape().to_vec(), data).expect("same shape"),
            labels: self.labels.clone(),
        }
    }

    /// Labels as class indices.
    pub fn class_labels(&self) -> Result<Vec<usize>> {
        self.labels
            .iter()
            .map(|&l| {
                if l >= 0.0 && l.fract() == 0.0 {
                    Ok(l as usize)
                } else {
                    Err(Error::Format(format!("label {l} is not a class index")))
                }
            })
            .collect()
    }
}

/// Parses CSV text: comma separated numbers, an optional header row, the
/// last column being the label.
pub fn parse_csv(text: &str) -> Result<Table> {
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let parsed: std::result::Result<Vec<f64>, _> =
            line.split(',').map(|f| f.trim().parse::<f64>()).collect();
        match parsed {
            Ok(r) => rows.push(r),
            Err(_) if rows.is_empty() && lineno == 0 => continue,
            Err(e) => {
                return Err(Error::Format(format!("line {}: {e}", lineno + 1)));
            }
        }
    }
    let width = rows.first().map(Vec::len).unwrap_or(0);
    if width < 2 {
        return Err(Error::Format("need at least one feature column and a label column".into()));
    }
    if let Some(i) = rows.iter().position(|r| r.len() != width) {
        return Err(Error::Format(format!("row {} has {} fields, expected {width}", i + 1, rows[i].len())));
    }
    let n = rows.len();
    let mut feats = Vec::with_capacity(n * (width - 1));
    let mut labels = Vec::with_capacity(n);
    for r in rows {
        feats.extend_from_slice(&r[..width - 1]);
        labels.push(r[width - 1]);
    }
    Ok(Table { features: Tensor::new(vec![n, width - 1], feats)?, labels })
}

pub fn load_csv(path: &Path) -> Result<Table> {
    parse_csv(&fs::read_to_string(path)?)
}

/// Directed edges over interned string ids.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct EdgeList {
    /// Node names in first-seen order; a node's index is its position.
    pub names: Vec<String>,
    pub edges: Vec<(usize, usize)>,
}

impl EdgeList {
    pub fn num_nodes(&self) -> usize {
        self.names.len()
    }
}

/// Parses `parent<TAB>child` lines. Blank lines and `#` comments are skipped.
pub fn parse_tsv(text: &str) -> Result<EdgeList> {
    let mut ids: HashMap<String, usize> = HashMap::new();
    let mut out = EdgeList::default();
    let mut intern = |name: &str, out: &mut EdgeList| -> usize {
        *ids.entry(name.to_string()).or_insert_with(|| {
            out.names.push(name.to_string());
            out.names.len() - 1
        })
    };
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim_end_matches(['\r', '\n']);
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 2 || fields.iter().any(|f| f.trim().is_empty()) {
            return Err(Error::Format(format!(
                "line {}: expected `parent<TAB>child`, got {line:?}",
                lineno + 1
            )));
        }
        let u = intern(fields[0].trim(), &mut out);
        let v = intern(fields[1].trim(), &mut out);
        out.edges.push((u, v));
    }
    if out.edges.is_empty() {
        return Err(Error::Format("edge list is empty".into()));
    }
    Ok(out)
}

pub fn load_tsv(path: &Path) -> Result<EdgeList> {
    parse_tsv(&fs::read_to_string(path)?)
}

/// The first `nodes` nodes of a complete `branching`-ary tree in
/// breadth-first order, named `n0, n1, …`.
pub fn complete_tree(branching: usize, nodes: usize) -> Result<EdgeList> {
    if branching == 0 || nodes < 2 {
        return Err(Error::InvalidArgument("a tree needs branching ≥ 1 and at least two nodes".into()));
    }
    Ok(EdgeList {
        names: (0..nodes).map(|i| format!("n{i}")).collect(),
        edges: (1..nodes).map(|c| ((c - 1) / branching, c)).collect(),
    })
}
