//! Energy-based transformers: an energy function over (context, prediction)
//! pairs, trained by unrolled gradient descent on predictions and run at
//! inference time as an optimizer.

pub mod baseline;
pub mod checkpoint;
pub mod error;
pub mod flops;
pub mod harness;
pub mod model;
pub mod nn;
pub mod params;
pub mod tasks;
pub mod think;
pub mod train;

pub use error::{EbtError, Result};
pub use model::{Context, DataMode, EbtConfig, EbtModel, PredictionState, Topology, Variant};
