//! Adam-family optimizers for Gaussian splatting, with a small differentiable
//! 2D testbed to exercise them.

pub mod error;
pub mod image;
pub mod harness;
pub mod loss;
pub mod optimizer;
pub mod pipeline;
pub mod primitives;
pub mod renderer;
pub mod rng;

pub use error::{LabError, Result};
