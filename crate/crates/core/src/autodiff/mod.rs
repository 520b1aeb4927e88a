//! Minimal reverse-mode automatic differentiation over dense tensors.
//!
//! Only first derivatives are supported. Second-order quantities elsewhere in the crate
//! are obtained from finite differences of gradients.

mod scalar;
mod tape;
mod tensor;

pub use scalar::Scalar;
pub(crate) use tape::runner_up_index;
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;
