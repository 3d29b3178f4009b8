//! Dense tensors with a reverse-mode automatic-differentiation tape.
//!
//! Layouts are row-major and channels-last. Both `f32` (training) and `f64`
//! (gradient checks) element types are supported through [`Real`].

pub mod error;
pub mod gradcheck;
pub mod io;
pub mod kernels;
pub mod param;
pub mod real;
pub mod tape;
pub mod tensor;

pub use error::{Result, TensorError};
pub use gradcheck::{grad_check, grad_check_params, grad_check_params_with, grad_check_with, grad_pairs, param_grad_pairs, relative_error, GradPairs, Stencil};
pub use kernels::BilinearTap;
pub use param::{ParamId, ParamStore, Parameter};
pub use real::{DType, Real};
pub use tape::{CustomOp, Gradients, Tape, Var};
pub use tensor::Tensor;
