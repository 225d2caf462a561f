//! Dense row-major tensors and a tape-based reverse-mode autodiff engine.
//!
//! Every primitive recorded on a [`Tape`] has a backward rule that is itself
//! expressed in recorded primitives, so [`Tape::vjp_graph`] can build
//! vector-Jacobian products that are differentiable again. Plain
//! [`Tape::vjp`] evaluates the same rules numerically without growing the
//! tape.

mod error;
pub mod kernels;
mod tape;
mod tensor;

pub use error::{Result, TensorError};
pub use tape::{NodeRef, Tape};
pub use tensor::{checksum_all, Precision, Tensor};
