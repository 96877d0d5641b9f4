//! Patch-based crack segmentation with a structured-prediction CNN.

pub mod dataset;
pub mod error;
pub mod evaluation;
pub mod experiments;
pub mod inference;
pub mod io;
pub mod network;
pub mod rng;
pub mod tensor;

pub use error::{Error, Result};
