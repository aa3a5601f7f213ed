//! Dense `f64` tensors with a dynamic reverse-mode tape.

mod gradcheck;
pub mod kernels;
mod tape;
mod tensor;

pub use gradcheck::{gradcheck, GradcheckReport};
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;
