//! Dense tensors and the reverse-mode tape everything else is built on.

mod scalar;
mod tape;
mod tensor;

pub use scalar::Scalar;
pub use tape::{Tape, Var, ATTENTION_MASK_VALUE};
pub use tensor::{matmul, softmax, Tensor};

/// Layer-norm variance guard.
pub const LAYER_NORM_EPS: f64 = 1e-8;
/// Guard inside logarithms and norms.
pub const LOG_EPS: f64 = 1e-12;
