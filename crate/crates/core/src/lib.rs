//! Generation of fluorescein-angiography video series from a single color
//! fundus photograph: an autoregressive conditional GAN with an unsupervised
//! change-based knowledge mask, plus the training, inference, and evaluation
//! machinery around it.

pub mod autograd;
pub mod checkpoint;
pub mod cli;
pub mod data_pipeline;
pub mod error;
pub mod inference;
pub mod knowledge_mask;
pub mod losses;
pub mod metrics;
pub mod models;
pub mod nn;
pub mod trainer;

pub use error::{Error, Result};
