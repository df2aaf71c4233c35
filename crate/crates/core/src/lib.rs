pub mod ablation;
pub mod data;
pub mod decoder;
pub mod encoder;
pub mod metrics;
mod error;
pub mod model;
pub mod nn;
pub mod postprocess;
pub mod synthetic;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
