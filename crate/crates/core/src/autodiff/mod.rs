//! Reverse-mode automatic differentiation over dense `f64` tensors.

mod gradcheck;
mod kernels;
mod suite;
mod tape;
mod tensor;

pub use gradcheck::{
    analytic_gradients, compare_gradients, eval_scalar, grad_check, relative_error, CheckReport,
    ParamCheck,
};
pub use suite::primitive_suite;
pub use tape::{Gradients, Primitive, Tape, Var, BCE_EPS, LAYER_NORM_EPS};
pub use tensor::Tensor;
