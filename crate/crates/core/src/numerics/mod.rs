//! Dense linear algebra and hand-differentiated operators.

mod gradcheck;
pub mod layers;
mod matrix;
pub mod ops;
pub(crate) mod param;

pub use gradcheck::{grad_check, numeric_gradient, relative_error, GradReport};
pub use layers::{Dense, Ffn, LayerNorm};
pub use matrix::Matrix;
pub use ops::{
    layer_norm, linear, matmul, matmul_nt, matmul_tn, registered_ops, relu, sigmoid, softmax_rows, DiffOp,
};
pub use param::{Param, ParamSet};
