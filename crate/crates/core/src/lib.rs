//! Shared-unified-expert mixture-of-experts dual encoder for unified
//! physical/digital face attack detection.

pub mod ablation;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod encoder;
pub mod error;
pub mod metrics;
pub mod model;
pub mod moe;
pub mod params;
pub mod rng;
pub mod train;

pub use checkpoint::Checkpoint;
pub use config::ExperimentConfig;
pub use error::{CheckpointError, Error, Result};
pub use model::{DualEncoder, ModelConfig, Objective, Placement, PromptBank};
pub use moe::{LossWeights, SueLayer, SueOptions};
pub use params::{Adam, AdamConfig, ParamId, ParamStore, Session};
pub use rng::SplitMix64;
