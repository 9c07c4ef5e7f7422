//! Unified multimodal masked-token model over a synthetic scene-grid world:
//! data, tokenizers, transformer, training objectives, decoding, rewards,
//! GRPO post-training, evaluation and the stage pipeline.

pub mod align;
pub mod checkpoint;
pub mod codec;
pub mod data;
pub mod decoder;
pub mod error;
pub mod evalbench;
pub mod grpo;
pub mod model;
pub mod objectives;
pub mod pipeline;
pub mod rewards;
pub mod schedule;
pub mod world;

pub use error::{Error, Result};
