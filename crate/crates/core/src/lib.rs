//! Dual-latent variational autoencoder with contrastive pairs in data space
//! and latent space, plus the evaluation protocol used to measure how well
//! content and transformation factors separate.

pub mod autograd;
pub mod checkpoint;
pub mod datasets;
pub mod error;
pub mod eval;
pub mod losses;
pub mod model;
pub mod pairing;
pub mod rng;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
