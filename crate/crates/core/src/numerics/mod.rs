//! Dense `f64` tensors, reverse-mode differentiation and gradient checking.

mod gradcheck;
mod tape;
mod tensor;

pub use gradcheck::{gradient_check, relative_error, GradCheckOptions, GradCheckReport};
pub use tape::{Gradients, OpKind, Tape, Var};
pub use tensor::{logsumexp, Tensor};
