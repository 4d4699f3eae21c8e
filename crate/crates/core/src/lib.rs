pub mod ablation;
pub mod cli;
pub mod config;
pub mod discriminator;
pub mod data;
pub mod error;
pub mod generator;
pub mod image;
pub mod losses;
pub mod metrics;
pub mod nn;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
pub use tensor::Tensor;
