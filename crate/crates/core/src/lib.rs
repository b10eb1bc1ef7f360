//! Longitudinal visual question answering: a dual-image encoder-decoder with
//! learned time encodings, its data pipeline, training loop and metrics.

pub mod config;
pub mod data;
pub mod error;
pub mod fusion;
pub mod metrics;
pub mod model;
pub mod params;
pub mod seq2seq;
pub mod text;
pub mod train;
pub mod vision;

pub use config::{DecodeStrategy, GenerationConfig, InputMode, ModelConfig, VisionConfig};
pub use error::{Error, Result};
pub use model::{Example, Model};
pub use params::ParamStore;
pub use text::{TokenSequence, Vocab};
