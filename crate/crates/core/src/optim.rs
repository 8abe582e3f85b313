//! Optimizers that accumulate parameter updates in MCF.
//!
//! The update direction is computed from working-precision gradients; only
//! the final `param += -lr * u` goes through `grow_expn`, so an update far
//! below the parameter's ulp survives in the trailing components instead of
//! being rounded away. Side buffers are working-precision tensors unless
//! `mc_state` is set, in which case they are kept as 2-component MC tensors.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::mct::{self, McTensor};
use crate::nn::Module;
use crate::precision::Precision;
use crate::tensor::Tensor;

/// Common interface of the optimizers.
pub trait Optimizer {
    /// Applies one update to every parameter using its grad buffer.
    fn step(&mut self, params: Vec<(String, &mut McTensor)>) -> Result<()>;

    fn step_module(&mut self, model: &mut dyn Module) -> Result<()> {
        self.step(model.named_parameters_mut())
    }
}

fn grad_of<'a>(name: &str, p: &'a McTensor) -> Result<&'a Tensor> {
    p.grad()
        .ok_or_else(|| Error::InvalidArgument(format!("parameter `{name}` has no gradient; run backward first")))
}

/// `param += update` with `update` already on the grid. Elements with a zero
/// update keep their exact bits.
fn apply_update(p: &mut McTensor, update: &Tensor) -> Result<()> {
    if update.data().iter().all(|&u| u == 0.0) {
        return Ok(());
    }
    let grown = mct::grow_expn(p, update)?;
    let nc = p.nc();
    let mut data = p.data().to_vec();
    for (i, &u) in update.data().iter().enumerate() {
        if u != 0.0 {
            data[i * nc..(i + 1) * nc].copy_from_slice(grown.element(i));
        }
    }
    p.assign(&McTensor::from_components(p.shape().to_vec(), nc, p.precision(), data)?)
}

/// A side buffer in working precision or as a 2-component MC tensor.
#[derive(Clone, Debug)]
enum Buffer {
    Plain(Tensor),
    Mc(McTensor),
}

impl Buffer {
    fn zeros(shape: &[usize], mc_state: bool, p: Precision) -> Result<Self> {
        Ok(if mc_state {
            Buffer::Mc(McTensor::zeros(shape.to_vec(), 2, p)?)
        } else {
            Buffer::Plain(Tensor::zeros(shape.to_vec()))
        })
    }

    /// `self = a * self + b * x`, each product and the sum rounded to `p`
    /// (plain) or carried in MCF.
    fn blend(&mut self, a: f64, b: f64, x: &Tensor, p: Precision) -> Result<()> {
        match self {
            Buffer::Plain(t) => {
                let (a, b) = (p.round(a), p.round(b));
                *t = t.zip_map(x, |s, v| p.round(p.round(a * s) + p.round(b * v)))?;
            }
            Buffer::Mc(m) => {
                let scaled = mct::scaling_n(m, &Tensor::scalar(a), false)?;
                let bx = x.map(|v| p.round(p.round(b) * v));
                *m = mct::grow_expn(&scaled, &bx)?;
            }
        }
        Ok(())
    }

    fn value(&self) -> Tensor {
        match self {
            Buffer::Plain(t) => t.clone(),
            Buffer::Mc(m) => m.approx(),
        }
    }
}

/// Stochastic gradient descent with heavy-ball momentum:
/// `buf = momentum * buf + g` (with `buf = g` on the first step) and
/// `param += -lr * buf`.
#[derive(Clone, Debug)]
pub struct McSgd {
    pub lr: f64,
    pub momentum: f64,
    pub mc_state: bool,
    buffers: HashMap<String, Buffer>,
}

impl McSgd {
    pub fn new(lr: f64, momentum: f64) -> Self {
        McSgd { lr, momentum, mc_state: false, buffers: HashMap::new() }
    }

    pub fn with_mc_state(mut self, on: bool) -> Self {
        self.mc_state = on;
        self
    }

    /// Momentum buffer of a parameter, if one exists.
    pub fn momentum_buffer(&self, name: &str) -> Option<Tensor> {
        self.buffers.get(name).map(Buffer::value)
    }
}

impl Optimizer for McSgd {
    fn step(&mut self, params: Vec<(String, &mut McTensor)>) -> Result<()> {
        for (name, param) in params {
            let p = param.precision();
            let g = grad_of(&name, param)?.clone();
            let direction = if self.momentum != 0.0 {
                match self.buffers.get_mut(&name) {
                    Some(buf) => buf.blend(self.momentum, 1.0, &g, p)?,
                    None => {
                        let mut buf = Buffer::zeros(param.shape(), self.mc_state, p)?;
                        buf.blend(0.0, 1.0, &g, p)?;
                        self.buffers.insert(name.clone(), buf);
                    }
                }
                self.buffers[&name].value()
            } else {
                g
            };
            let lr = p.round(self.lr);
            let update = direction.map(|u| p.round(-(lr * u)));
            apply_update(param, &update)?;
        }
        Ok(())
    }
}

/// Adam with bias correction; moments in working precision or MCF.
#[derive(Clone, Debug)]
pub struct McAdam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub mc_state: bool,
    step: u64,
    moments: HashMap<String, (Buffer, Buffer)>,
}

impl McAdam {
    pub fn new(lr: f64) -> Self {
        McAdam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            mc_state: false,
            step: 0,
            moments: HashMap::new(),
        }
    }

    pub fn with_betas(mut self, beta1: f64, beta2: f64) -> Self {
        self.beta1 = beta1;
        self.beta2 = beta2;
        self
    }

    pub fn with_eps(mut self, eps: f64) -> Self {
        self.eps = eps;
        self
    }

    pub fn with_mc_state(mut self, on: bool) -> Self {
        self.mc_state = on;
        self
    }

    pub fn steps(&self) -> u64 {
        self.step
    }
}

impl Optimizer for McAdam {
    fn step(&mut self, params: Vec<(String, &mut McTensor)>) -> Result<()> {
        self.step += 1;
        let t = self.step as i32;
        for (name, param) in params {
            let p = param.precision();
            let g = grad_of(&name, param)?.clone();
            if !self.moments.contains_key(&name) {
                let m = Buffer::zeros(param.shape(), self.mc_state, p)?;
                let v = Buffer::zeros(param.shape(), self.mc_state, p)?;
                self.moments.insert(name.clone(), (m, v));
            }
            let (m, v) = self.moments.get_mut(&name).expect("inserted above");
            m.blend(self.beta1, 1.0 - self.beta1, &g, p)?;
            let g2 = g.map(|x| p.round(x * x));
            v.blend(self.beta2, 1.0 - self.beta2, &g2, p)?;
            let c1 = p.round(1.0 - self.beta1.powi(t));
            let c2 = p.round(1.0 - self.beta2.powi(t));
            let (lr, eps) = (p.round(self.lr), p.round(self.eps));
            let update = m.value().zip_map(&v.value(), |mi, vi| {
                let mh = p.round(mi / c1);
                let vh = p.round(vi / c2);
                let denom = p.round(p.round(vh.sqrt()) + eps);
                p.round(-p.round(lr * mh) / denom)
            })?;
            apply_update(param, &update)?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn param(v: f64, nc: usize, p: Precision) -> McTensor {
        McTensor::scalar(v, nc, p).unwrap().reshape(vec![1]).unwrap()
    }

    #[test]
    fn missing_gradient_names_the_parameter() {
        let mut x = param(1.0, 2, Precision::B16);
        let err = McSgd::new(0.1, 0.0).step(vec![("layer.weight".into(), &mut x)]).unwrap_err();
        assert!(err.to_string().contains("layer.weight"));
    }

    #[test]
    fn tiny_update_survives_in_second_component() {
        let p = Precision::B16;
        let tiny = crate::precision::pow2(-20);
        for (nc, expect) in [(1, vec![1.0]), (2, vec![1.0, -tiny])] {
            let mut x = param(1.0, nc, p);
            x.accumulate_grad(&Tensor::from_vec(vec![tiny])).unwrap();
            McSgd::new(1.0, 0.0).step(vec![("w".into(), &mut x)]).unwrap();
            assert_eq!(x.data(), expect.as_slice());
        }
    }

    #[test]
    fn zero_lr_and_zero_grad_leave_bits() {
        let p = Precision::B32;
        let x0 = McTensor::from_components(vec![2], 2, p, vec![1.0, crate::precision::pow2(-30), -0.0, 0.0]).unwrap();
        for (lr, g) in [(0.0, 1.0), (0.5, 0.0)] {
            let mut x = x0.clone();
            x.accumulate_grad(&Tensor::from_vec(vec![g, g])).unwrap();
            McSgd::new(lr, 0.9).step(vec![("w".into(), &mut x)]).unwrap();
            let bits = |t: &McTensor| t.data().iter().map(|c| c.to_bits()).collect::<Vec<_>>();
            assert_eq!(bits(&x), bits(&x0));
        }
    }

    #[test]
    fn adam_first_step_is_signed_lr() {
        let p = Precision::B64;
        let mut x = McTensor::from_components(vec![3], 2, p, vec![1.0, 0.0, -2.0, 0.0, 0.5, 0.0]).unwrap();
        x.accumulate_grad(&Tensor::from_vec(vec![3.0, -0.25, 0.0])).unwrap();
        let mut opt = McAdam::new(0.01);
        opt.step(vec![("w".into(), &mut x)]).unwrap();
        let v = x.approx();
        assert!((v.data()[0] - 0.99).abs() < 1e-9);
        assert!((v.data()[1] + 1.99).abs() < 1e-9);
        assert_eq!(v.data()[2], 0.5);
        assert_eq!(opt.steps(), 1);
    }
}
