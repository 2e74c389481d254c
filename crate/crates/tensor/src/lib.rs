//! Dense `f64` tensors, a recording tape for reverse-mode differentiation,
//! the Adam optimizer, and a finite-difference gradient checker.

mod adam;
mod conv;
mod error;
pub mod gradcheck;
mod tape;
mod tensor;

pub use adam::{AdamConfig, AdamState};
pub use conv::conv_out_len;
pub use error::{Result, TensorError};
pub use gradcheck::{grad_check, GradCheckReport};
pub use tape::{argmin_first, sigmoid_scalar, smallest_k, ElementwiseKind, Gradients, Tape, Var};
pub use tensor::Tensor;
