//! Dense-tensor reverse-mode differentiation.
//!
//! A [`Tape`] records primitive applications in evaluation order; each
//! primitive stores what its vector-Jacobian product needs. Parameters live
//! outside the tape as [`Param`]s and are bound by name for each forward
//! pass, so a fresh tape per step is the normal usage. Reductions run in a
//! fixed row-major order.

pub mod checkpoint;
mod gradcheck;
mod tape;
mod tensor;

pub use checkpoint::Checkpoint;
pub use gradcheck::{grad_check, grad_check_params, offset_uniform, primitive_suite};
pub use tape::{Tape, Var, L2_EPS};
pub use tensor::{Param, Tensor};
