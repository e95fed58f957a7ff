//! Transferability-guided attention for video unsupervised domain adaptation.
//!
//! The crate consumes precomputed per-frame backbone features and trains a
//! small transformer encoder whose attention can be driven by per-token
//! domain-discriminator error, alongside adversarial, entropy and
//! cross-correlation alignment losses.

pub mod attention;
pub mod batch;
pub mod checkpoint;
pub mod config;
pub mod dtab;
pub mod encoder;
pub mod error;
pub mod features;
pub mod gradcheck;
pub mod graph;
pub mod heads;
pub mod manifest;
pub mod model;
pub mod nn;
pub mod optim;
pub mod sampling;
pub mod synth;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use features::Domain;
pub use graph::{Graph, Var};
pub use tensor::{Tensor, TensorError};
