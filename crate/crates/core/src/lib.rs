//! Diffusion-augmented hierarchical VAE for multi-step stock return
//! forecasting, with a denoising score-matching head and a mean-variance
//! portfolio backtester on top of its predictions.

pub mod autodiff;
pub mod config;
pub mod data;
pub mod diffusion;
pub mod error;
pub mod evaluation;
pub mod gradcheck;
pub mod layers;
pub mod model;
pub mod optim;
pub mod params;
pub mod pipeline;
pub mod portfolio;
pub mod synth;
pub mod tensor;
pub mod training;

pub use error::{DvaError, Result};
pub use tensor::Tensor;
