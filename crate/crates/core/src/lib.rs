//! Cross-modal recipe embedding: hierarchical text encoders and an image
//! encoder aligned in a shared space with adversarial and translation
//! objectives, plus recipe-conditional image generation, retrieval
//! metrics and a distribution distance for generated images.
//!
//! Everything runs on dense `f64` arrays with a hand-rolled reverse-mode
//! tape ([`autodiff`]), single-threaded and deterministic for a fixed
//! seed, at desk scale.

pub mod autodiff;
pub mod checkpoint;
pub mod corpus;
pub mod encoders;
pub mod error;
pub mod evaluation;
pub mod generation;
pub mod losses;
pub mod nn;
pub mod rng;
pub mod trainer;

pub use error::{Result, XmodalError};
