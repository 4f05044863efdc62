//! Minimal dense tensor library with reverse-mode automatic differentiation.
//!
//! Layout is row-major NCHW throughout. [`Tape`] records a forward pass and
//! computes gradients of a scalar with [`Tape::backward`]. Generic over `f32`
//! (training) and `f64` (gradient verification).

mod element;
mod error;
pub mod gradcheck;
pub mod kernels;
pub mod norm;
mod tape;
mod tensor;

pub use element::{DType, Element};
pub use error::{Result, TensorError};
pub use gradcheck::{finite_diff_check, finite_diff_check_refined};
pub use kernels::{Activation, ConvGeometry};
pub use norm::{power_iteration, spectral_norm_apply, weight_norm_apply};
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;
