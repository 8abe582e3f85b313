//! Reverse-mode differentiation on a tape of standard-precision values.
//!
//! Every node holds a working-precision [`Tensor`]. MC forward operations
//! record the evaluated sum of their result as the node value and keep the
//! [`McTensor`] alongside, so later MC operations can continue in MCF. Local
//! Jacobians are evaluated at those evaluated sums, which makes the gradient
//! of an MC parameter equal to the gradient with respect to its leading
//! component.
//!
//! Elementwise operations are computed in binary64 and rounded once to the
//! tape precision. Reductions and matrix products accumulate in binary64 and
//! round each result once, the way low-precision tensor libraries use a wide
//! accumulator. Gradients are stored in the tape precision.

use std::cell::RefCell;
use std::collections::HashMap;
use std::sync::atomic::{AtomicU64, Ordering};

use crate::error::{Error, Result};
use crate::linalg::wide_matmul;
use crate::mct::{self, McTensor};
use crate::precision::Precision;
use crate::tensor::{Broadcast, Tensor};

static NEXT_TAPE: AtomicU64 = AtomicU64::new(1);

/// Vector-Jacobian product: maps the node's output gradient to one gradient
/// per parent, in parent order.
pub type Vjp = Box<dyn Fn(&Tensor) -> Result<Vec<Tensor>>>;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var {
    tape: u64,
    idx: usize,
}

struct Node {
    value: Tensor,
    mc: Option<McTensor>,
    parents: Vec<usize>,
    vjp: Option<Vjp>,
    param: Option<u64>,
}

pub struct Tape {
    id: u64,
    precision: Precision,
    nodes: RefCell<Vec<Node>>,
}

/// Result of [`Tape::backward`].
pub struct Gradients {
    tape: u64,
    grads: Vec<Option<Tensor>>,
    shapes: Vec<Vec<usize>>,
    params: HashMap<u64, Tensor>,
}

/// Elementwise `a + b` rounded to `p`.
fn add_rounded(p: Precision, a: &mut Tensor, b: &Tensor) {
    for (x, y) in a.data_mut().iter_mut().zip(b.data()) {
        *x = p.round(*x + y);
    }
}

/// Sum accumulated in binary64; callers round the result once.
fn wide_sum(xs: impl IntoIterator<Item = f64>) -> f64 {
    xs.into_iter().sum()
}

/// Sums a broadcast gradient back onto an operand of `numel` elements.
fn unbroadcast(p: Precision, g: &Tensor, index: &[usize], shape: &[usize]) -> Tensor {
    let mut out = Tensor::zeros(shape.to_vec());
    let d = out.data_mut();
    for (k, &i) in index.iter().enumerate() {
        d[i] += g.data()[k];
    }
    out.rounded(p)
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Row-wise log-softmax of an `n × c` matrix, evaluated in binary64.
fn log_softmax_rows(x: &Tensor) -> Result<Vec<f64>> {
    let (n, c) = x.dims2()?;
    let mut out = vec![0.0; n * c];
    for i in 0..n {
        let row = x.row(i);
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
        for j in 0..c {
            out[i * c + j] = row[j] - lse;
        }
    }
    Ok(out)
}

impl Tape {
    pub fn new(precision: Precision) -> Self {
        Tape {
            id: NEXT_TAPE.fetch_add(1, Ordering::Relaxed),
            precision,
            nodes: RefCell::new(Vec::new()),
        }
    }

    pub fn precision(&self) -> Precision {
        self.precision
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn check(&self, v: Var) -> Result<usize> {
        if v.tape != self.id {
            return Err(Error::Autodiff(
                "variable belongs to a different tape; run the forward pass on this tape first".into(),
            ));
        }
        Ok(v.idx)
    }

    fn push(&self, node: Node) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(node);
        Var { tape: self.id, idx: nodes.len() - 1 }
    }

    /// A leaf holding `t` rounded to the tape precision.
    pub fn leaf(&self, t: &Tensor) -> Var {
        self.push(Node {
            value: t.rounded(self.precision),
            mc: None,
            parents: Vec::new(),
            vjp: None,
            param: None,
        })
    }

    /// A leaf standing for an MC parameter. Its value is the evaluated sum
    /// and its gradient is reported under the parameter's id.
    pub fn mc_param(&self, x: &McTensor) -> Result<Var> {
        if x.precision() != self.precision {
            return Err(Error::InvalidArgument(format!(
                "parameter precision {} on a {} tape",
                x.precision(),
                self.precision
            )));
        }
        Ok(self.push(Node {
            value: x.approx(),
            mc: Some(x.clone()),
            parents: Vec::new(),
            vjp: None,
            param: Some(x.id()),
        }))
    }

    /// Records a custom operation. `value` is rounded to the tape precision
    /// and `mc`, if given, must share its shape.
    pub fn custom(
        &self,
        value: Tensor,
        mc: Option<McTensor>,
        parents: &[Var],
        vjp: Vjp,
    ) -> Result<Var> {
        let parents = parents.iter().map(|&v| self.check(v)).collect::<Result<Vec<_>>>()?;
        if let Some(m) = &mc {
            if m.shape() != value.shape() {
                return Err(Error::InvalidArgument(format!(
                    "MC value shape {:?} differs from node shape {:?}",
                    m.shape(),
                    value.shape()
                )));
            }
        }
        Ok(self.push(Node {
            value: value.rounded(self.precision),
            mc,
            parents,
            vjp: Some(vjp),
            param: None,
        }))
    }

    /// Records an MC-valued operation; the node value is `approx(value)`.
    pub fn custom_mc(&self, value: McTensor, parents: &[Var], vjp: Vjp) -> Result<Var> {
        self.custom(value.approx(), Some(value), parents, vjp)
    }

    pub fn value(&self, v: Var) -> Result<Tensor> {
        let i = self.check(v)?;
        Ok(self.nodes.borrow()[i].value.clone())
    }

    /// MC value of a node, if it was produced by an MC operation.
    pub fn mc_value(&self, v: Var) -> Result<Option<McTensor>> {
        let i = self.check(v)?;
        Ok(self.nodes.borrow()[i].mc.clone())
    }

    pub fn shape(&self, v: Var) -> Result<Vec<usize>> {
        let i = self.check(v)?;
        Ok(self.nodes.borrow()[i].value.shape().to_vec())
    }

    fn unary(
        &self,
        a: Var,
        f: impl Fn(f64) -> f64,
        df: impl Fn(f64, f64) -> f64 + 'static,
    ) -> Result<Var> {
        let p = self.precision;
        let x = self.value(a)?;
        let y = x.map(&f).rounded(p);
        let (xc, yc) = (x.clone(), y.clone());
        self.custom(
            y,
            None,
            &[a],
            Box::new(move |g| {
                let d = xc.data().iter().zip(yc.data()).zip(g.data());
                let data = d.map(|((&x, &y), &g)| p.round(g * p.round(df(x, y)))).collect();
                Ok(vec![Tensor::new(xc.shape().to_vec(), data)?])
            }),
        )
    }

    fn binary(
        &self,
        op: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        da: impl Fn(f64, f64) -> f64 + 'static,
        db: impl Fn(f64, f64) -> f64 + 'static,
    ) -> Result<Var> {
        let p = self.precision;
        let (x, y) = (self.value(a)?, self.value(b)?);
        let plan = Broadcast::new(op, x.shape(), y.shape())?;
        let data: Vec<f64> = plan
            .lhs
            .iter()
            .zip(&plan.rhs)
            .map(|(&i, &j)| p.round(f(x.data()[i], y.data()[j])))
            .collect();
        let out = Tensor::new(plan.shape.clone(), data)?;
        self.custom(
            out,
            None,
            &[a, b],
            Box::new(move |g| {
                let pairs = plan.lhs.iter().zip(&plan.rhs).zip(g.data());
                let (ga, gb): (Vec<f64>, Vec<f64>) = pairs
                    .map(|((&i, &j), &g)| {
                        let (u, v) = (x.data()[i], y.data()[j]);
                        (p.round(g * da(u, v)), p.round(g * db(u, v)))
                    })
                    .unzip();
                let ga = unbroadcast(p, &Tensor::from_vec(ga), &plan.lhs, x.shape());
                let gb = unbroadcast(p, &Tensor::from_vec(gb), &plan.rhs, y.shape());
                Ok(vec![ga, gb])
            }),
        )
    }

    /// Broadcasting elementwise sum.
    pub fn add(&self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |x, y| x + y, |_, _| 1.0, |_, _| 1.0)
    }

    pub fn sub(&self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |x, y| x - y, |_, _| 1.0, |_, _| -1.0)
    }

    /// Broadcasting elementwise product.
    pub fn mul(&self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |x, y| x * y, |_, y| y, |x, _| x)
    }

    pub fn scale(&self, a: Var, c: f64) -> Result<Var> {
        let c = self.precision.round(c);
        self.unary(a, move |x| c * x, move |_, _| c)
    }

    pub fn relu(&self, a: Var) -> Result<Var> {
        self.unary(a, |x| x.max(0.0), |x, _| if x > 0.0 { 1.0 } else { 0.0 })
    }

    pub fn sigmoid(&self, a: Var) -> Result<Var> {
        self.unary(a, sigmoid, |_, y| y * (1.0 - y))
    }

    pub fn tanh(&self, a: Var) -> Result<Var> {
        self.unary(a, f64::tanh, |_, y| 1.0 - y * y)
    }

    /// GELU, tanh approximation.
    pub fn gelu(&self, a: Var) -> Result<Var> {
        self.unary(a, gelu, |x, _| gelu_grad(x))
    }

    pub fn exp(&self, a: Var) -> Result<Var> {
        self.unary(a, f64::exp, |_, y| y)
    }

    pub fn log(&self, a: Var) -> Result<Var> {
        self.unary(a, f64::ln, |x, _| 1.0 / x)
    }

    pub fn square(&self, a: Var) -> Result<Var> {
        self.unary(a, |x| x * x, |x, _| 2.0 * x)
    }

    /// Sum of all elements to a scalar.
    pub fn sum(&self, a: Var) -> Result<Var> {
        let p = self.precision;
        let x = self.value(a)?;
        let s = p.round(wide_sum(x.data().iter().copied()));
        let shape = x.shape().to_vec();
        self.custom(
            Tensor::scalar(s),
            None,
            &[a],
            Box::new(move |g| Ok(vec![Tensor::full(shape.clone(), g.data()[0])])),
        )
    }

    pub fn mean(&self, a: Var) -> Result<Var> {
        let n = self.value(a)?.numel().max(1) as f64;
        let p = self.precision;
        let s = self.sum(a)?;
        self.unary(s, move |x| x / n, move |_, _| p.round(1.0 / n))
    }

    /// Matrix product of two standard operands, in working precision.
    pub fn matmul(&self, a: Var, b: Var) -> Result<Var> {
        let p = self.precision;
        let (x, y) = (self.value(a)?, self.value(b)?);
        let out = wide_matmul(p, &x, &y)?;
        self.custom(
            out,
            None,
            &[a, b],
            Box::new(move |g| {
                let ga = wide_matmul(p, g, &y.transpose()?)?;
                let gb = wide_matmul(p, &x.transpose()?, g)?;
                Ok(vec![ga, gb])
            }),
        )
    }

    pub fn transpose(&self, a: Var) -> Result<Var> {
        let x = self.value(a)?;
        self.custom(x.transpose()?, None, &[a], Box::new(|g| Ok(vec![g.transpose()?])))
    }

    pub fn reshape(&self, a: Var, shape: Vec<usize>) -> Result<Var> {
        let x = self.value(a)?;
        let old = x.shape().to_vec();
        self.custom(
            x.reshape(shape)?,
            None,
            &[a],
            Box::new(move |g| Ok(vec![g.clone().reshape(old.clone())?])),
        )
    }

    /// Row gather; gradients scatter-add into the selected rows.
    pub fn select_rows(&self, a: Var, idx: &[usize]) -> Result<Var> {
        let p = self.precision;
        let x = self.value(a)?;
        let out = x.select_rows(idx)?;
        let (idx, shape) = (idx.to_vec(), x.shape().to_vec());
        self.custom(
            out,
            None,
            &[a],
            Box::new(move |g| {
                let w = shape[1..].iter().product::<usize>();
                let mut gx = Tensor::zeros(shape.clone());
                let d = gx.data_mut();
                for (r, &i) in idx.iter().enumerate() {
                    for k in 0..w {
                        d[i * w + k] = p.round(d[i * w + k] + g.data()[r * w + k]);
                    }
                }
                Ok(vec![gx])
            }),
        )
    }

    /// Row-wise log-softmax of an `n × c` matrix.
    pub fn log_softmax(&self, a: Var) -> Result<Var> {
        let p = self.precision;
        let x = self.value(a)?;
        let (n, c) = x.dims2()?;
        let ls = Tensor::new(vec![n, c], log_softmax_rows(&x)?)?.rounded(p);
        let lsc = ls.clone();
        self.custom(
            ls,
            None,
            &[a],
            Box::new(move |g| {
                let mut out = vec![0.0; n * c];
                for i in 0..n {
                    let gs = p.round(wide_sum(g.row(i).iter().copied()));
                    for j in 0..c {
                        let sm = lsc.data()[i * c + j].exp();
                        out[i * c + j] = p.round(g.data()[i * c + j] - p.round(sm * gs));
                    }
                }
                Ok(vec![Tensor::new(vec![n, c], out)?])
            }),
        )
    }

    /// Mean squared error against a binary64 target.
    ///
    /// When the prediction carries an MC value the target is taken as an
    /// expansion with the same component count and the residual is formed in
    /// MCF and rounded once, so it keeps its relative precision even when the
    /// prediction and target nearly cancel. Plain predictions use the target
    /// rounded to the working precision.
    pub fn mse(&self, pred: Var, target: &Tensor) -> Result<Var> {
        let p = self.precision;
        let x = self.value(pred)?;
        if x.shape() != target.shape() {
            return Err(Error::InvalidArgument(format!(
                "mse: prediction shape {:?} and target shape {:?} differ",
                x.shape(),
                target.shape()
            )));
        }
        let residual = match self.mc_value(pred)? {
            Some(m) => {
                let t = mct::expand(target, m.nc(), p)?;
                mct::sub_mcn(&m, &t)?.approx()
            }
            None => x.zip_map(&target.rounded(p), |a, b| p.round(a - b))?,
        };
        let n = residual.numel().max(1) as f64;
        let sq = residual.data().iter().map(|r| p.round(r * r));
        let loss = p.round(wide_sum(sq) / n);
        let shape = x.shape().to_vec();
        self.custom(
            Tensor::scalar(loss),
            None,
            &[pred],
            Box::new(move |g| {
                let c = p.round(2.0 / n);
                let data = residual.data().iter().map(|r| p.round(p.round(c * r) * g.data()[0]));
                Ok(vec![Tensor::new(shape.clone(), data.collect())?])
            }),
        )
    }

    /// Binary cross-entropy of probabilities against 0/1 targets, with the
    /// logarithms clamped at -100.
    pub fn bce(&self, prob: Var, target: &Tensor) -> Result<Var> {
        let p = self.precision;
        let x = self.value(prob)?;
        if x.shape() != target.shape() {
            return Err(Error::InvalidArgument(format!(
                "bce: probability shape {:?} and target shape {:?} differ",
                x.shape(),
                target.shape()
            )));
        }
        let t = target.clone();
        let n = x.numel().max(1) as f64;
        let terms = x.data().iter().zip(t.data()).map(|(&q, &y)| {
            let lq = q.ln().max(-100.0);
            let l1q = (1.0 - q).ln().max(-100.0);
            p.round(-(y * lq + (1.0 - y) * l1q))
        });
        let loss = p.round(wide_sum(terms) / n);
        self.custom(
            Tensor::scalar(loss),
            None,
            &[prob],
            Box::new(move |g| {
                let data = x.data().iter().zip(t.data()).map(|(&q, &y)| {
                    let d = (q - y) / (q * (1.0 - q)).max(1e-12) / n;
                    p.round(p.round(d) * g.data()[0])
                });
                Ok(vec![Tensor::new(x.shape().to_vec(), data.collect())?])
            }),
        )
    }

    /// Mean cross-entropy of `n × c` logits against class labels.
    pub fn cross_entropy(&self, logits: Var, labels: &[usize]) -> Result<Var> {
        let p = self.precision;
        let x = self.value(logits)?;
        let (n, c) = x.dims2()?;
        if labels.len() != n || labels.iter().any(|&l| l >= c) {
            return Err(Error::InvalidArgument(format!(
                "cross_entropy: {} labels in 0..{c} expected for {n} rows",
                n
            )));
        }
        let ls = log_softmax_rows(&x)?;
        let picked = labels.iter().enumerate().map(|(i, &l)| p.round(-ls[i * c + l]));
        let loss = p.round(wide_sum(picked) / n as f64);
        let labels = labels.to_vec();
        self.custom(
            Tensor::scalar(loss),
            None,
            &[logits],
            Box::new(move |g| {
                let mut out = vec![0.0; n * c];
                for i in 0..n {
                    for j in 0..c {
                        let onehot = if labels[i] == j { 1.0 } else { 0.0 };
                        let d = (ls[i * c + j].exp() - onehot) / n as f64;
                        out[i * c + j] = p.round(p.round(d) * g.data()[0]);
                    }
                }
                Ok(vec![Tensor::new(vec![n, c], out)?])
            }),
        )
    }

    /// Gradients of the scalar `loss` with respect to every node.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let root = self.check(loss)?;
        let nodes = self.nodes.borrow();
        if nodes[root].value.numel() != 1 {
            return Err(Error::Autodiff(format!(
                "backward needs a scalar loss, got shape {:?}",
                nodes[root].value.shape()
            )));
        }
        let p = self.precision;
        let mut grads: Vec<Option<Tensor>> = (0..nodes.len()).map(|_| None).collect();
        grads[root] = Some(Tensor::full(nodes[root].value.shape().to_vec(), 1.0));
        for i in (0..=root).rev() {
            let (Some(g), Some(vjp)) = (&grads[i], &nodes[i].vjp) else { continue };
            let parent_grads = vjp(g)?;
            for (&pi, pg) in nodes[i].parents.iter().zip(parent_grads) {
                if pg.shape() != nodes[pi].value.shape() {
                    return Err(Error::Autodiff(format!(
                        "gradient shape {:?} does not match value shape {:?}",
                        pg.shape(),
                        nodes[pi].value.shape()
                    )));
                }
                match &mut grads[pi] {
                    Some(acc) => add_rounded(p, acc, &pg),
                    slot => *slot = Some(pg),
                }
            }
        }
        let mut params: HashMap<u64, Tensor> = HashMap::new();
        for (i, node) in nodes.iter().enumerate() {
            if let Some(id) = node.param {
                let g = grads[i].clone().unwrap_or_else(|| Tensor::zeros(node.value.shape().to_vec()));
                match params.get_mut(&id) {
                    Some(acc) => add_rounded(p, acc, &g),
                    None => {
                        params.insert(id, g);
                    }
                }
            }
        }
        let shapes = nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        Ok(Gradients { tape: self.id, grads, shapes, params })
    }
}

impl Gradients {
    /// Gradient of the loss with respect to `v`; zero if `v` does not feed
    /// the loss.
    pub fn wrt(&self, v: Var) -> Result<Tensor> {
        if v.tape != self.tape {
            return Err(Error::Autodiff("variable belongs to a different tape".into()));
        }
        Ok(self.grads[v.idx].clone().unwrap_or_else(|| Tensor::zeros(self.shapes[v.idx].clone())))
    }

    /// Gradient recorded for an MC parameter, if it was on the tape.
    pub fn param(&self, x: &McTensor) -> Option<&Tensor> {
        self.params.get(&x.id())
    }

    /// Adds the recorded gradient into the parameter's grad buffer. Returns
    /// whether the parameter was on the tape.
    pub fn accumulate_into(&self, x: &mut McTensor) -> Result<bool> {
        match self.params.get(&x.id()) {
            Some(g) => {
                x.accumulate_grad(g)?;
                Ok(true)
            }
            None => Ok(false),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_gradient_is_ones() {
        let tape = Tape::new(Precision::B64);
        let x = tape.leaf(&Tensor::new(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let s = tape.sum(x).unwrap();
        let g = tape.backward(s).unwrap();
        assert_eq!(g.wrt(x).unwrap(), Tensor::ones(vec![2, 2]));
    }

    #[test]
    fn constant_loss_gives_zero_gradients() {
        let tape = Tape::new(Precision::B32);
        let x = tape.leaf(&Tensor::ones(vec![3]));
        let c = tape.leaf(&Tensor::scalar(2.0));
        let g = tape.backward(c).unwrap();
        assert_eq!(g.wrt(x).unwrap(), Tensor::zeros(vec![3]));
    }

    #[test]
    fn non_scalar_loss_and_foreign_vars_are_rejected() {
        let tape = Tape::new(Precision::B32);
        let x = tape.leaf(&Tensor::ones(vec![3]));
        assert!(matches!(tape.backward(x), Err(Error::Autodiff(_))));
        let other = Tape::new(Precision::B32);
        let y = other.leaf(&Tensor::scalar(1.0));
        assert!(matches!(tape.backward(y), Err(Error::Autodiff(_))));
        assert!(tape.relu(y).is_err());
    }

    #[test]
    fn broadcast_add_reduces_gradient() {
        let tape = Tape::new(Precision::B64);
        let a = tape.leaf(&Tensor::zeros(vec![3, 2]));
        let b = tape.leaf(&Tensor::from_vec(vec![1.0, 2.0]));
        let s = tape.add(a, b).unwrap();
        let l = tape.sum(s).unwrap();
        let g = tape.backward(l).unwrap();
        assert_eq!(g.wrt(b).unwrap().data(), &[3.0, 3.0]);
    }

    #[test]
    fn losses_at_reference_points() {
        let tape = Tape::new(Precision::B64);
        let q = tape.leaf(&Tensor::from_vec(vec![0.5, 0.5]));
        let l = tape.bce(q, &Tensor::from_vec(vec![1.0, 0.0])).unwrap();
        assert!((tape.value(l).unwrap().data()[0] - std::f64::consts::LN_2).abs() < 1e-15);
        let y = Tensor::from_vec(vec![1.0, -2.0]);
        let pr = tape.leaf(&y);
        let m = tape.mse(pr, &y).unwrap();
        assert_eq!(tape.value(m).unwrap().data(), &[0.0]);
        let z = tape.leaf(&Tensor::zeros(vec![1, 4]));
        let ce = tape.cross_entropy(z, &[2]).unwrap();
        assert!((tape.value(ce).unwrap().data()[0] - 4f64.ln()).abs() < 1e-15);
    }
}
