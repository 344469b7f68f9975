//! Map-assisted latent image compression.

pub mod error;
pub mod exec;
pub mod autoencoder;
pub mod codec;
pub mod config;
pub mod data;
pub mod diffusion;
pub mod entropy;
pub mod evalkit;
pub mod math;
pub mod pipeline;
pub mod range_coder;
pub mod tensor;
pub mod training;
pub mod transforms;

pub use error::{Error, Result};
