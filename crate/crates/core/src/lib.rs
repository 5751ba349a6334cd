//! Serial mini-batch ensemble attack engine for pixel-to-pixel models.
//!
//! The crate covers the whole pipeline at desk scale: a small tensor
//! and reverse-mode differentiation kernel, an encoder-decoder model
//! zoo, intra-batch feature/output ensembles, the task objectives, the
//! serial mini-batch attack with long-term gradient memories, baseline
//! attacks, and a reproducible experiment harness with black-box
//! transfer evaluation.

pub mod attack;
pub mod data;
pub mod ensemble;
pub mod error;
pub mod experiment;
pub mod gradcheck;
pub mod graph;
pub mod imageio;
pub mod losses;
pub mod model;
pub mod report;
pub mod tensor;
pub mod zoo;

pub use error::{Error, Result};
pub use graph::{Graph, NodeId};
pub use tensor::Tensor;
