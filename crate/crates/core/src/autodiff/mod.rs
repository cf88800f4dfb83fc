//! Reverse-mode automatic differentiation over dense `f64` tensors.
//!
//! A [`Graph`] records every operation as it is evaluated. Because nodes are
//! appended in evaluation order, walking the tape backwards visits each node
//! after all of its consumers, so [`Graph::backward`] touches every node once.
//! Leaf gradients accumulate across calls until [`Graph::zero_grads`].
//!
//! Broadcasting is limited to scalar-with-tensor; layers that need a bias
//! use [`Graph::add_row`].

mod graph;
mod kernels;
mod tensor;

pub use graph::{Graph, Reduce, Var};
pub use kernels::Segment;
pub use tensor::Tensor;
