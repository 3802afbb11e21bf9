//! Minimal dense numeric substrate.
//!
//! Everything is `f64`, row-major, and shaped explicitly. The free functions in
//! [`ops`] are the inference path; [`Tape`] records the same primitives for
//! reverse-mode differentiation.

mod ops;
mod tape;
mod tensor;

pub use ops::{add_channel_bias, conv1d, global_avg_pool, l2_normalize, matmul, relu, NORM_EPS};
pub use tape::{log_sum_exp, Gradients, Tape, Var};
pub use tensor::Tensor;
