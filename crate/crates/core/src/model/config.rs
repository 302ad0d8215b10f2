use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Hyperparameters of one decoder capacity tier.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub n_kv_heads: usize,
    pub d_ff: usize,
    pub vocab_size: usize,
    pub max_seq_len: usize,
    pub norm_eps: f64,
    pub rope_theta: f64,
}

/// Named tiers. The four published tiers differ only in width; `desk` is a
/// seconds-scale configuration for tests and laptops.
pub const TIER_NAMES: [&str; 5] = ["tiny", "small", "medium", "large", "desk"];

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            d_model: 768,
            n_layers: 12,
            n_heads: 12,
            n_kv_heads: 4,
            d_ff: 3072,
            vocab_size: 50_304,
            max_seq_len: 2048,
            norm_eps: 1e-6,
            rope_theta: 10_000.0,
        }
    }
}

impl ModelConfig {
    pub fn tier(name: &str) -> Result<Self> {
        let width = |d: usize| Self { d_model: d, d_ff: 4 * d, ..Self::default() };
        let cfg = match name {
            "tiny" => width(96),
            "small" => width(384),
            "medium" => width(768),
            "large" => width(1536),
            "desk" => Self::desk(256),
            other => return Err(Error::Config(format!("unknown model tier {other:?}"))),
        };
        cfg.validate()?;
        if cfg.d_ff != 4 * cfg.d_model {
            return Err(Error::Config("named tiers expand the feed-forward to 4·d_model".into()));
        }
        Ok(cfg)
    }

    pub fn desk(vocab_size: usize) -> Self {
        Self {
            d_model: 16,
            n_layers: 2,
            n_heads: 2,
            n_kv_heads: 1,
            d_ff: 64,
            vocab_size,
            max_seq_len: 32,
            norm_eps: 1e-6,
            rope_theta: 10_000.0,
        }
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn kv_dim(&self) -> usize {
        self.head_dim() * self.n_kv_heads
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("d_model", self.d_model),
            ("n_layers", self.n_layers),
            ("n_heads", self.n_heads),
            ("n_kv_heads", self.n_kv_heads),
            ("d_ff", self.d_ff),
            ("vocab_size", self.vocab_size),
            ("max_seq_len", self.max_seq_len),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be positive")));
        }
        if self.d_model % self.n_heads != 0 {
            return Err(Error::Config(format!(
                "d_model {} is not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if self.n_heads % self.n_kv_heads != 0 {
            return Err(Error::Config(format!(
                "n_heads {} is not divisible by n_kv_heads {}",
                self.n_heads, self.n_kv_heads
            )));
        }
        if self.head_dim() % 2 != 0 {
            return Err(Error::Config(format!("rotary embedding needs an even head dim, got {}", self.head_dim())));
        }
        if !(self.norm_eps > 0.0) || !(self.rope_theta > 0.0) {
            return Err(Error::Config("norm_eps and rope_theta must be positive".into()));
        }
        Ok(())
    }

    /// Closed-form parameter count of an untied decoder with this config.
    pub fn param_count(&self) -> usize {
        let d = self.d_model;
        let attn = 2 * d * d + 2 * d * self.kv_dim();
        let ffn = 3 * d * self.d_ff;
        let per_layer = attn + ffn + 2 * d;
        2 * self.vocab_size * d + self.n_layers * per_layer + d
    }
}
