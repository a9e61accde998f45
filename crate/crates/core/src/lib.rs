//! Toy-scale bi-level domain adaptation for zero-shot sketch-based image
//! retrieval: synthetic two-modality data, hand-differentiated encoders and
//! losses, a graph-regularized semantic projection, a momentum SGD trainer
//! with alternating adversarial updates, retrieval and hubness evaluation,
//! and proxy-A-distance estimates of latent domain divergence.

pub mod checkpoint;
pub mod data;
pub mod encoders;
pub mod error;
pub mod eval;
pub mod experiment;
pub mod graph;
pub mod losses;
pub mod model;
pub mod rng;
pub mod tensor;
pub mod theory;
pub mod trainer;

pub use error::{Error, Result};
