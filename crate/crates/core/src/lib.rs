//! Blemished subject-driven generation at desk scale.
//!
//! Paired blemished datasets, textual inversion on a toy latent diffusion
//! model, cross-attention key/value rectification, and a similarity-ratio
//! benchmark.

pub mod rng;

pub mod artifact;
pub mod corpus;
pub mod dataset;
pub mod embed;
pub mod diffusion;
pub mod digest;
pub mod error;
pub mod eval;
pub mod experiment;
pub mod image;
pub mod inversion;
pub mod rectify;

pub use error::{Error, Result};
pub use image::ImageTensor;
