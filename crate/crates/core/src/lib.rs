//! Latent-space molecule optimization: a SELFIES VAE, property predictors
//! stacked on the decoder, reverse optimization of latent vectors,
//! refinement and a benchmark harness.

pub mod bench;
pub mod checkpoint;
pub mod config;
pub mod dataset;
pub mod error;
pub mod optimize;
pub mod oracles;
pub mod predictor;
pub mod refine;
pub mod vae;
pub mod workspace;

pub use error::{LimoError, Result};
