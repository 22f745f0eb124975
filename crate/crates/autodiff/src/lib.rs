//! Reverse-mode automatic differentiation over dense `f64` arrays.
//!
//! Every backward rule is written in terms of the same primitives as the
//! forward pass, so gradients computed with `create_graph = true` are
//! themselves differentiable. This is what makes gradients of gradients
//! (and therefore backpropagation through an unrolled gradient-descent
//! loop) work without a separate Hessian-vector-product entry point.
//!
//! Values are immutable once created. Graphs are single-threaded, but a
//! [`Value`] is `Send + Sync`, so distinct graphs may be built on distinct
//! threads over shared read-only parameters.

mod backward;
mod check;
mod error;
mod kernels;
mod ops;
pub mod rng;
mod value;

pub use backward::grad;
pub use check::{finite_difference_check, relative_error};
pub use error::AutodiffError;
pub use value::{
    default_precision, grad_enabled, no_grad, numel, set_default_precision, with_precision,
    Precision, Value,
};
