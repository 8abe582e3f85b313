//! Multi-component floating-point (MCF) tensors.
//!
//! A value is held as an unevaluated sum of working-precision floats
//! (binary16, binary32 or binary64), ordered by decreasing magnitude. The
//! crate provides the error-free transformations underneath, elementwise and
//! matrix operators on [`McTensor`], a small reverse-mode tape, layers,
//! optimizers, a hyperbolic embedding trainer, exact-arithmetic oracles and
//! the experiment drivers used by the `mcfloat` command line tool.

pub mod autodiff;
pub mod data;
pub mod eft;
pub mod error;
pub mod experiments;
pub mod hyperbolic;
pub mod linalg;
pub mod mct;
pub mod nn;
pub mod optim;
pub mod oracle;
pub mod precision;
pub mod tensor;

pub use error::{Error, Result};
pub use mct::McTensor;
pub use precision::Precision;
pub use tensor::Tensor;
