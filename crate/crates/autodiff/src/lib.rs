//! Reverse-mode automatic differentiation over dense `f64` tensors.
//!
//! The engine is deliberately small: a [`Tape`] records primitive
//! applications, [`Tape::backward`] sweeps it once, and gradients land in a
//! [`ParamSet`]. [`Adam`] updates parameters and [`gradient_check`] compares
//! tape gradients against central finite differences.

pub mod adam;
pub mod error;
pub mod gradcheck;
pub mod params;
pub mod suite;
pub mod tape;
pub mod tensor;

pub use adam::{Adam, AdamConfig};
pub use error::{AdError, Result};
pub use gradcheck::{check_params, gradient_check, relative_error, CheckStatus, GradCheckReport};
pub use params::{Param, ParamId, ParamSet};
pub use tape::{Primitive, Tape, Var};
pub use tensor::Tensor;
