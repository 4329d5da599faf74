//! Dense tensors, a recording tape with reverse-mode differentiation, and
//! finite-difference gradient verification.
//!
//! Everything runs in `f64`. Attention constructions rely on
//! [`NEG_INF_BIAS`] standing in for `-inf`; at double precision
//! `exp(NEG_INF_BIAS)` underflows to exactly zero after max-subtraction.

mod gradcheck;
mod tape;
mod tensor;

pub use gradcheck::{finite_difference_check, finite_difference_check_fn, DEFAULT_STEP};
pub use tape::{Gradients, RowGather, Tape, Var};
pub use tensor::Tensor;

pub(crate) use tape::gelu_scalar;

/// Finite stand-in for `-inf` in attention biases.
pub const NEG_INF_BIAS: f64 = -1e9;

/// Layer-norm epsilon.
pub const LN_EPS: f64 = 1e-5;
