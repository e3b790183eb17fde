//! Single-stage anchor-based detector for grayscale thermal imagery.

pub mod anchors;
pub mod augment;
pub mod data;
pub mod error;
pub mod evaluate;
pub mod geometry;
pub mod image;
pub mod loss;
pub mod model_graph;
pub mod nn;
pub mod postprocess;
pub mod scalar;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
