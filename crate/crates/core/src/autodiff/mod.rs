//! Small reverse-mode differentiation engine and the AdamW optimizer.

mod graph;
mod optim;
mod tensor;

pub use graph::{Feeds, Gradients, Graph, NodeId};
pub use optim::{AdamW, AdamWState, GraphOptimizer};
pub use tensor::Tensor;

pub(crate) use graph::sigmoid;
pub(crate) use tensor::dot;

#[cfg(test)]
mod tests;
