//! Minimal reverse-mode automatic differentiation for CPU training.
//!
//! Tensors are dense and row-major. Every forward pass records onto a fresh
//! [`Graph`]; [`Graph::backward`] returns gradients for the variable leaves.
//! All kernels are deterministic: parallel work is split only across
//! independent outputs and reductions run in a fixed order.

pub mod error;
pub mod float;
pub mod gradcheck;
pub mod graph;
pub mod ops;
pub mod params;
pub mod tensor;

pub use error::TensorError;
pub use float::Float;
pub use gradcheck::{check_gradients, GradCheckReport};
pub use graph::{Gradients, Graph, Op, Var};
pub use params::{he_normal, Adam, AdamConfig, BoundParams, Param, ParamStore};
pub use tensor::Tensor;
