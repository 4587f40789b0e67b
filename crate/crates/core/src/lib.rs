//! Single-stream vision-language encoder with contrastive pre-training and
//! adapter fine-tuning, built on a small reverse-mode autograd engine.

pub mod adapters;
pub mod autograd;
pub mod data;
pub mod error;
pub mod eval;
pub mod exec;
pub mod gradcheck;
pub mod heatmap;
pub mod metrics;
pub mod model;
pub mod objectives;
pub mod rng;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
pub use tensor::Tensor;
