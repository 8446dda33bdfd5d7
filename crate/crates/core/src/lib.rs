//! TRIG scene-text recognition: TPS rectification, a transformer feature
//! extractor over 1-D column patches with residual attention and a learnable
//! initial embedding, and a GRU attention decoder seeded by that embedding.
//!
//! Everything runs on a small tape-based autograd over dense row-major
//! tensors, generic over `f32` and `f64`.

pub mod analysis;
pub mod autograd;
pub mod charset;
pub mod checkpoint;
pub mod cli;
pub mod decoder;
pub mod error;
pub mod gradcheck;
pub mod image;
pub mod model;
pub mod parallel;
pub mod params;
pub mod rectifier;
pub mod synthgen;
pub mod tensor;
pub mod tfe;
pub mod training;

pub use charset::Charset;
pub use checkpoint::Checkpoint;
pub use decoder::{recognize, DecodeMode, Recognition};
pub use error::{Error, Result};
pub use image::RgbImage;
pub use model::{Model, ModelConfig};
pub use parallel::Exec;
pub use tensor::{Real, Tensor};
pub use training::TrainConfig;
