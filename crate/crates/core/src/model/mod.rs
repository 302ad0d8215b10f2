//! Decoder language model.

pub mod config;
pub mod decoder;

pub use config::{ModelConfig, TIER_NAMES};
pub use decoder::{gqa_attention, rope_apply, swiglu_ffn, AttentionWeights, Decoder, LayerParams};
