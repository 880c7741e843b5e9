//! Minimal reverse-mode differentiation for small dense networks.
//!
//! A [`Tape`] records one forward pass; [`Tape::backward`] consumes it and
//! returns [`Gradients`] for every leaf. [`ParameterSet`] holds named
//! trainable tensors with Adam state, and [`Mlp`] builds dense networks on
//! top of both.

mod error;
pub mod gradcheck;
pub mod nn;
mod params;
mod tape;
mod tensor;

pub use error::{AutodiffError, Result};
pub use nn::{Activation, Mlp};
pub use params::{ParameterSet, ADAM_BETA1, ADAM_BETA2, ADAM_EPS};
pub use tape::{Gradients, Tape, Var};
pub use gradcheck::{check_gradients, primitive_catalog, GradCheck};
pub use tensor::{argmax, logsumexp, softmax, softmax_into, Tensor};
