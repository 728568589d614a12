//! Dense tensors and a reverse-mode differentiation tape.

mod graph;
mod tensor;

pub use graph::{Gradients, Graph, Mask, Var};
pub use tensor::{log_softmax, logsumexp2, Tensor};
