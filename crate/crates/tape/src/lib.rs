//! Reverse-mode automatic differentiation over small dense tensors.
//!
//! A [`Graph`] records operations eagerly as they are applied; calling
//! [`Graph::backward`] on a scalar node returns gradients for every leaf
//! created with [`Graph::param`]. The element type is generic over `f32` and
//! `f64` so the same model code runs in fast and in exact-check modes.

pub mod gradcheck;
mod graph;
pub mod kernels;
mod tensor;

pub use graph::{Grads, Graph, Var};
pub use tensor::{Real, Tensor};
