//! Built-in differentiable operations. Each submodule extends [`crate::Graph`].

pub mod conv;
pub mod elementwise;
pub mod norm;
pub mod pool;
pub mod shape;
pub mod softmax;

pub use softmax::softmax_values;
