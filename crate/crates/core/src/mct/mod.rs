//! Multi-component tensors.
//!
//! An [`McTensor`] stores every element as an unevaluated sum of `nc`
//! working-precision components ordered by non-increasing magnitude. The
//! components of one element are contiguous (component index varies fastest),
//! so the logical layout is `(*shape, nc)`.
//!
//! All operators are pure and return a tensor with the same component count as
//! their inputs; binary operators pad the operand with fewer components, and
//! broadcast shapes the same way as [`Tensor`] does.

pub mod blob;
pub mod kernels;

use std::borrow::Cow;
use std::cmp::Ordering;
use std::sync::atomic::{AtomicU64, Ordering as AtomicOrdering};

use crate::error::{shape_mismatch, Error, Result};
use crate::precision::Precision;
use crate::tensor::{numel, Broadcast, Tensor};
use crate::with_format;

static NEXT_ID: AtomicU64 = AtomicU64::new(1);

fn fresh_id() -> u64 {
    NEXT_ID.fetch_add(1, AtomicOrdering::Relaxed)
}

#[derive(Clone, Debug)]
pub struct McTensor {
    shape: Vec<usize>,
    nc: usize,
    precision: Precision,
    data: Vec<f64>,
    grad: Option<Tensor>,
    id: u64,
}

/// Equality of shape, component count, precision and component values. The
/// gradient buffer and identity are ignored.
impl PartialEq for McTensor {
    fn eq(&self, other: &Self) -> bool {
        self.shape == other.shape
            && self.nc == other.nc
            && self.precision == other.precision
            && self.data == other.data
    }
}

fn check_nc(nc: usize) -> Result<()> {
    if nc == 0 {
        Err(Error::InvalidArgument("component count must be at least 1".into()))
    } else {
        Ok(())
    }
}

impl McTensor {
    /// Builds a tensor from raw components laid out as `(*shape, nc)`.
    ///
    /// Components must already be representable in `precision`; they are not
    /// reordered, so the result may be a raw expansion awaiting
    /// [`renormalize`].
    pub fn from_components(
        shape: impl Into<Vec<usize>>,
        nc: usize,
        precision: Precision,
        data: Vec<f64>,
    ) -> Result<Self> {
        check_nc(nc)?;
        let shape = shape.into();
        if numel(&shape) * nc != data.len() {
            return Err(Error::InvalidArgument(format!(
                "shape {:?} with nc={} needs {} components, got {}",
                shape,
                nc,
                numel(&shape) * nc,
                data.len()
            )));
        }
        if let Some(bad) = data.iter().find(|&&c| !precision.is_representable(c)) {
            return Err(Error::InvalidArgument(format!(
                "component {bad:e} is not representable in {precision}"
            )));
        }
        Ok(McTensor {
            shape,
            nc,
            precision,
            data,
            grad: None,
            id: fresh_id(),
        })
    }

    pub fn zeros(shape: impl Into<Vec<usize>>, nc: usize, precision: Precision) -> Result<Self> {
        check_nc(nc)?;
        let shape = shape.into();
        let n = numel(&shape) * nc;
        Ok(Self::raw(shape, nc, precision, vec![0.0; n]))
    }

    /// A single-element tensor of shape `[]`.
    pub fn scalar(value: f64, nc: usize, precision: Precision) -> Result<Self> {
        from_float(&Tensor::scalar(value), nc, precision)
    }

    pub(crate) fn raw(shape: Vec<usize>, nc: usize, precision: Precision, data: Vec<f64>) -> Self {
        debug_assert_eq!(numel(&shape) * nc, data.len());
        McTensor {
            shape,
            nc,
            precision,
            data,
            grad: None,
            id: fresh_id(),
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn nc(&self) -> usize {
        self.nc
    }

    pub fn precision(&self) -> Precision {
        self.precision
    }

    pub fn numel(&self) -> usize {
        numel(&self.shape)
    }

    /// Identity used to attach gradients recorded on a tape. Clones share it.
    pub fn id(&self) -> u64 {
        self.id
    }

    /// All components, element-major with the component index fastest.
    pub fn data(&self) -> &[f64] {
        &self.data
    }

    /// Components of the `i`-th element (row-major), largest first.
    pub fn element(&self, i: usize) -> &[f64] {
        &self.data[i * self.nc..(i + 1) * self.nc]
    }

    /// Component `k` of every element as a standard tensor.
    pub fn component(&self, k: usize) -> Result<Tensor> {
        if k >= self.nc {
            return Err(Error::InvalidArgument(format!(
                "component {k} out of range for nc={}",
                self.nc
            )));
        }
        let data = self.data.iter().skip(k).step_by(self.nc).copied().collect();
        Tensor::new(self.shape.clone(), data)
    }

    /// The leading component, which carries the gradient.
    pub fn fc(&self) -> Tensor {
        self.component(0).expect("nc >= 1")
    }

    pub fn approx(&self) -> Tensor {
        approx(self)
    }

    pub fn grad(&self) -> Option<&Tensor> {
        self.grad.as_ref()
    }

    /// Adds `g` into the gradient buffer, rounding each sum to the working
    /// precision. Gradients accumulate until [`McTensor::zero_grad`].
    pub fn accumulate_grad(&mut self, g: &Tensor) -> Result<()> {
        if g.shape() != self.shape.as_slice() {
            return Err(shape_mismatch("accumulate_grad", &self.shape, g.shape()));
        }
        let p = self.precision;
        match &mut self.grad {
            Some(buf) => {
                for (b, &x) in buf.data_mut().iter_mut().zip(g.data()) {
                    *b = p.round(*b + x);
                }
            }
            None => self.grad = Some(g.rounded(p)),
        }
        Ok(())
    }

    pub fn zero_grad(&mut self) {
        self.grad = None;
    }

    pub fn take_grad(&mut self) -> Option<Tensor> {
        self.grad.take()
    }

    /// Replaces the components in place, keeping identity and gradient.
    pub fn assign(&mut self, other: &McTensor) -> Result<()> {
        if other.shape != self.shape || other.nc != self.nc || other.precision != self.precision {
            return Err(shape_mismatch("assign", &self.shape, &other.shape));
        }
        self.data.copy_from_slice(&other.data);
        Ok(())
    }

    /// Same values with `nc` components: zero-padded when growing, renormalized
    /// when shrinking.
    pub fn with_nc(&self, nc: usize) -> Result<McTensor> {
        check_nc(nc)?;
        match nc.cmp(&self.nc) {
            Ordering::Equal => Ok(self.clone()),
            Ordering::Greater => Ok(self.padded(nc).into_owned()),
            Ordering::Less => renormalize(self, nc),
        }
    }

    fn padded(&self, nc: usize) -> Cow<'_, McTensor> {
        if nc == self.nc {
            return Cow::Borrowed(self);
        }
        let mut data = Vec::with_capacity(self.numel() * nc);
        for i in 0..self.numel() {
            data.extend_from_slice(self.element(i));
            data.extend(std::iter::repeat(0.0).take(nc - self.nc));
        }
        Cow::Owned(McTensor::raw(self.shape.clone(), nc, self.precision, data))
    }

    pub fn reshape(&self, shape: impl Into<Vec<usize>>) -> Result<McTensor> {
        let shape = shape.into();
        if numel(&shape) != self.numel() {
            return Err(shape_mismatch("reshape", &self.shape, &shape));
        }
        Ok(McTensor::raw(shape, self.nc, self.precision, self.data.clone()))
    }

    /// Transpose of a rank-2 tensor; components move with their element.
    pub fn transpose(&self) -> Result<McTensor> {
        let (r, c) = match self.shape.as_slice() {
            &[r, c] => (r, c),
            other => {
                return Err(Error::InvalidArgument(format!(
                    "transpose needs a matrix, got shape {other:?}"
                )))
            }
        };
        let nc = self.nc;
        let mut data = vec![0.0; self.data.len()];
        for i in 0..r {
            for j in 0..c {
                let src = (i * c + j) * nc;
                let dst = (j * r + i) * nc;
                data[dst..dst + nc].copy_from_slice(&self.data[src..src + nc]);
            }
        }
        Ok(McTensor::raw(vec![c, r], nc, self.precision, data))
    }

    /// Gathers rows along the leading axis with all their components.
    pub fn select_rows(&self, idx: &[usize]) -> Result<McTensor> {
        let rows = *self.shape.first().ok_or_else(|| {
            Error::InvalidArgument("select_rows on a rank-0 tensor".into())
        })?;
        let width = self.numel() / rows.max(1) * self.nc;
        let mut data = Vec::with_capacity(idx.len() * width);
        for &i in idx {
            if i >= rows {
                return Err(Error::InvalidArgument(format!(
                    "index {i} out of range for {rows} rows"
                )));
            }
            data.extend_from_slice(&self.data[i * width..(i + 1) * width]);
        }
        let mut shape = self.shape.clone();
        shape[0] = idx.len();
        Ok(McTensor::raw(shape, self.nc, self.precision, data))
    }

    /// Writes `src` (one row's worth of elements) into row `i`.
    pub fn set_row(&mut self, i: usize, src: &McTensor) -> Result<()> {
        let rows = self.shape.first().copied().unwrap_or(1);
        let width = self.numel() / rows.max(1) * self.nc;
        if src.data.len() != width || src.nc != self.nc || i >= rows {
            return Err(shape_mismatch("set_row", &self.shape, &src.shape));
        }
        self.data[i * width..(i + 1) * width].copy_from_slice(&src.data);
        Ok(())
    }

    /// Whether any component is NaN or infinite.
    pub fn has_non_finite(&self) -> bool {
        self.data.iter().any(|c| !c.is_finite())
    }
}

fn same_precision(op: &'static str, a: Precision, b: Precision) -> Result<()> {
    if a == b {
        Ok(())
    } else {
        Err(Error::InvalidArgument(format!(
            "{op}: precision mismatch ({a} vs {b})"
        )))
    }
}

/// Applies a per-element kernel over two broadcast MC operands.
fn binary_map(
    op: &'static str,
    x: &McTensor,
    y: &McTensor,
    kernel: impl Fn(&[f64], &[f64], &mut [f64]),
) -> Result<McTensor> {
    same_precision(op, x.precision, y.precision)?;
    let nc = x.nc.max(y.nc);
    let (x, y) = (x.padded(nc), y.padded(nc));
    if x.shape == y.shape {
        let mut out = vec![0.0; x.data.len()];
        for (i, o) in out.chunks_exact_mut(nc).enumerate() {
            kernel(x.element(i), y.element(i), o);
        }
        return Ok(McTensor::raw(x.shape.clone(), nc, x.precision, out));
    }
    let plan = Broadcast::new(op, &x.shape, &y.shape)?;
    let mut out = vec![0.0; plan.lhs.len() * nc];
    for (k, o) in out.chunks_exact_mut(nc).enumerate() {
        kernel(x.element(plan.lhs[k]), y.element(plan.rhs[k]), o);
    }
    Ok(McTensor::raw(plan.shape, nc, x.precision, out))
}

/// Applies a per-element kernel to an MC operand and a broadcast standard
/// operand. Standard values are rounded onto the working grid first.
fn mixed_map(
    op: &'static str,
    x: &McTensor,
    v: &Tensor,
    out_nc: usize,
    kernel: impl Fn(&[f64], f64, &mut [f64]),
) -> Result<McTensor> {
    let p = x.precision;
    if x.shape.as_slice() == v.shape() {
        let mut out = vec![0.0; x.numel() * out_nc];
        for (i, o) in out.chunks_exact_mut(out_nc).enumerate() {
            kernel(x.element(i), p.round(v.data()[i]), o);
        }
        return Ok(McTensor::raw(x.shape.clone(), out_nc, p, out));
    }
    let plan = Broadcast::new(op, &x.shape, v.shape())?;
    let mut out = vec![0.0; plan.lhs.len() * out_nc];
    for (k, o) in out.chunks_exact_mut(out_nc).enumerate() {
        kernel(x.element(plan.lhs[k]), p.round(v.data()[plan.rhs[k]]), o);
    }
    Ok(McTensor::raw(plan.shape, out_nc, p, out))
}

fn unary_map(x: &McTensor, out_nc: usize, kernel: impl Fn(&[f64], &mut [f64])) -> McTensor {
    let mut out = vec![0.0; x.numel() * out_nc];
    for (i, o) in out.chunks_exact_mut(out_nc).enumerate() {
        kernel(x.element(i), o);
    }
    McTensor::raw(x.shape.clone(), out_nc, x.precision, out)
}

/// Embeds a standard tensor as component 0; the other components are zero.
/// Values are rounded onto the grid of `precision`.
pub fn from_float(t: &Tensor, nc: usize, precision: Precision) -> Result<McTensor> {
    check_nc(nc)?;
    let mut data = vec![0.0; t.numel() * nc];
    for (o, &v) in data.iter_mut().step_by(nc).zip(t.data()) {
        *o = precision.round(v);
    }
    Ok(McTensor::raw(t.shape().to_vec(), nc, precision, data))
}

/// Greedy `nc`-component expansion of binary64 values: each component is the
/// rounding of what the previous ones left over. With `nc = 1` this equals
/// [`from_float`].
pub fn expand(t: &Tensor, nc: usize, precision: Precision) -> Result<McTensor> {
    check_nc(nc)?;
    let mut data = Vec::with_capacity(t.numel() * nc);
    for &v in t.data() {
        let mut rest = v;
        for _ in 0..nc {
            let c = precision.round(rest);
            data.push(c);
            // the rounding error of a binary64 value is exact in binary64
            rest = if c.is_finite() { rest - c } else { 0.0 };
        }
    }
    Ok(McTensor::raw(t.shape().to_vec(), nc, precision, data))
}

/// Evaluated sum of every element, accumulated from the smallest component.
pub fn approx(x: &McTensor) -> Tensor {
    let data = with_format!(x.precision, F => {
        (0..x.numel()).map(|i| kernels::approx::<F>(x.element(i))).collect()
    });
    Tensor::new(x.shape.clone(), data).expect("shape preserved")
}

/// Treats each element's components as a raw expansion and renormalizes it to
/// `r_nc` nonoverlapping components.
pub fn renormalize(h: &McTensor, r_nc: usize) -> Result<McTensor> {
    check_nc(r_nc)?;
    Ok(with_format!(h.precision, F => unary_map(h, r_nc, |e, o| {
        let mut terms = kernels::Terms::from_slice(e);
        kernels::renormalize::<F>(&mut terms, o)
    })))
}

/// Moves zero components behind the nonzero ones, then truncates or pads.
pub fn simple_renorm(h: &McTensor, r_nc: usize) -> Result<McTensor> {
    check_nc(r_nc)?;
    Ok(unary_map(h, r_nc, kernels::simple_renorm))
}

/// Adds a standard tensor to an MC tensor.
pub fn grow_expn(x: &McTensor, v: &Tensor) -> Result<McTensor> {
    with_format!(x.precision, F => mixed_map("grow_expn", x, v, x.nc, kernels::grow_expn::<F>))
}

/// Multiplies by a standard tensor. With `expanded` the result keeps the
/// extra `nc + 1`-th component.
pub fn scaling_n(x: &McTensor, v: &Tensor, expanded: bool) -> Result<McTensor> {
    let out_nc = if expanded { x.nc + 1 } else { x.nc };
    with_format!(x.precision, F => mixed_map("scaling_n", x, v, out_nc, kernels::scaling_n::<F>))
}

pub fn add_mcn(x: &McTensor, y: &McTensor) -> Result<McTensor> {
    with_format!(x.precision, F => binary_map("add_mcn", x, y, kernels::add_mcn::<F>))
}

/// `x - y`, as `add_mcn(x, negate(y))`.
pub fn sub_mcn(x: &McTensor, y: &McTensor) -> Result<McTensor> {
    add_mcn(x, &negate(y))
}

pub fn div_mcn(x: &McTensor, y: &McTensor) -> Result<McTensor> {
    with_format!(x.precision, F => binary_map("div_mcn", x, y, kernels::div_mcn::<F>))
}

/// Standard tensor divided by an MC tensor.
pub fn div_n(v: &Tensor, y: &McTensor) -> Result<McTensor> {
    div_mcn(&from_float(v, y.nc, y.precision)?, y)
}

pub fn mul_mcn(x: &McTensor, y: &McTensor) -> Result<McTensor> {
    with_format!(x.precision, F => binary_map("mul_mcn", x, y, kernels::mul_mcn::<F>))
}

pub fn mul_mcn_slow(x: &McTensor, y: &McTensor) -> Result<McTensor> {
    with_format!(x.precision, F => binary_map("mul_mcn_slow", x, y, kernels::mul_mcn_slow::<F>))
}

pub fn square_mcn(x: &McTensor) -> McTensor {
    with_format!(x.precision, F => unary_map(x, x.nc, kernels::square_mcn::<F>))
}

pub fn exp_mcn(x: &McTensor) -> McTensor {
    with_format!(x.precision, F => {
        let ln2 = kernels::ln2_expansion::<F>(x.nc + 1);
        unary_map(x, x.nc, |e, o| kernels::exp_mcn::<F>(e, &ln2, o))
    })
}

/// Flips the sign of every component; exact.
pub fn negate(x: &McTensor) -> McTensor {
    McTensor::raw(
        x.shape.clone(),
        x.nc,
        x.precision,
        x.data.iter().map(|&c| -c).collect(),
    )
}

/// Elementwise ordering of the evaluated sums. Unordered pairs (NaN) yield
/// `None`.
pub fn compare(x: &McTensor, y: &McTensor) -> Result<Vec<Option<Ordering>>> {
    let (a, b) = (approx(x), approx(y));
    let plan = Broadcast::new("compare", a.shape(), b.shape())?;
    Ok(plan
        .lhs
        .iter()
        .zip(&plan.rhs)
        .map(|(&i, &j)| a.data()[i].partial_cmp(&b.data()[j]))
        .collect())
}

/// Elementwise `approx(x) > 0`.
pub fn positive_mask(x: &McTensor) -> Vec<bool> {
    approx(x).data().iter().map(|&v| v > 0.0).collect()
}
