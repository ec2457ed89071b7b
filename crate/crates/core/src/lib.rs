//! Decoder-only fine-tuning and tiled inference for promptable segmentation
//! of large grayscale rock images.

pub mod commands;
pub mod config;
pub mod error;
pub mod figures;
pub mod imaging;
pub mod inference;
pub mod metrics;
pub mod model;
pub mod prompts;
pub mod safetensors;
pub mod synthetic;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
