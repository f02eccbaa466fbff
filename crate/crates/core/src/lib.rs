//! Masked-autoencoder self pre-training of vision transformers on small
//! single-channel inspection images, with a scalar degradation regression
//! head and GradCAM heatmaps.

pub mod checkpoint;
pub mod data;
mod error;
pub mod interpret;
pub mod mae;
pub mod params;
pub mod rng;
pub mod tensor;
pub mod training;
pub mod vit;

pub use error::{Error, Result};
