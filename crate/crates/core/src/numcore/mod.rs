//! Dense tensors and reverse-mode differentiation, sized for small recurrent
//! models trained on a CPU.

mod graph;
mod tensor;

pub use graph::{Graph, Var};
pub(crate) use graph::transpose;
pub use tensor::{Real, Tensor};
