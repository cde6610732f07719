//! Text-to-meme generation: text encoding, a stacked attentional generator
//! with template-pattern editing, discriminators, image/text matching,
//! training, and corpus curation.

pub mod adversary;
pub mod config;
pub mod damsm;
pub mod error;
pub mod generator;
pub mod gradcheck;
pub mod graph;
pub mod imaging;
pub mod kernels;
pub mod nn;
pub mod pipeline;
pub mod tensor;
pub mod synth;
pub mod text;
pub mod trainer;

pub use config::{ModelConfig, NoiseDistribution};
pub use error::{Error, Result};
pub use tensor::Tensor;
