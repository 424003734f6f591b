//! Complex-valued neural networks with variational sparsification.

// `!(x >= 0.0)` is used on purpose so that NaN lands in the error branch.
#![allow(clippy::neg_cmp_op_on_partial_ord)]
// Tape ops are fallible and do not fit the `std::ops` signatures.
#![allow(clippy::should_implement_trait)]
#![allow(clippy::too_many_arguments, clippy::type_complexity)]

pub mod autograd;
pub mod ctensor;
pub mod data;
pub mod dist;
pub mod error;
pub mod exec;
pub mod experiment;
mod linalg;
pub mod model;
pub mod pipeline;
pub mod pruning;
pub mod varlayers;
pub mod verify;

pub use error::{Error, Result};
