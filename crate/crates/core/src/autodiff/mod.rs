//! Minimal reverse-mode automatic differentiation over dense `f64` matrices.
//!
//! A [`Tape`] records a forward computation; [`Tape::backward_into`] adds the
//! gradients of a scalar loss into a [`ParamStore`], which also owns the Adam
//! optimizer state.

mod check;
mod params;
mod tape;
mod tensor;

pub use check::{input_gradient_error, param_gradient_error, relative_error};
pub use params::{AdamConfig, ParamId, ParamStore};
pub use tape::{logsumexp, sigmoid, Gradients, Tape, Var, LAYER_NORM_EPS};
pub use tensor::{SparseMatrix, Tensor};
