//! Architecture hyperparameters, validated once and passed around immutably.

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

fn default_d_head() -> Option<usize> {
    None
}
fn default_dropout() -> f64 {
    0.1
}
fn default_rope_base() -> f64 {
    10_000.0
}
fn default_age_z() -> usize {
    4
}
fn default_year_z() -> usize {
    2
}

/// Shape of the decoder-only sequence model. All widths are in scalar units;
/// the attention split is `n_local_heads` exact windowed-softmax heads followed
/// by `n_heads - n_local_heads` linear-attention heads over rotary queries and
/// keys mapped through positive random features.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub max_len: usize,
    pub n_layers: usize,
    pub d_model: usize,
    pub d_ff: usize,
    pub n_heads: usize,
    pub n_local_heads: usize,
    pub local_window: usize,
    /// Random features per linear-attention head.
    pub n_random_features: usize,
    /// Per-head width; `None` means `d_model / n_heads`.
    #[serde(default = "default_d_head")]
    pub d_head: Option<usize>,
    #[serde(default = "default_dropout")]
    pub dropout_rate: f64,
    #[serde(default = "default_rope_base")]
    pub rope_base: f64,
    /// Age-stream feature split: `d_model / age_z` tanh columns, the rest sine.
    #[serde(default = "default_age_z")]
    pub age_z: usize,
    /// Year-stream feature split, same convention.
    #[serde(default = "default_year_z")]
    pub year_z: usize,
}

impl ModelConfig {
    /// The published configuration: 10 layers, width 240, 8 heads of which 6
    /// are local with window 36, 256 random features, head width 64.
    pub fn paper_scale() -> Self {
        ModelConfig {
            vocab_size: 661,
            max_len: 1560,
            n_layers: 10,
            d_model: 240,
            d_ff: 960,
            n_heads: 8,
            n_local_heads: 6,
            local_window: 36,
            n_random_features: 256,
            d_head: Some(64),
            dropout_rate: 0.1,
            rope_base: 10_000.0,
            age_z: 4,
            year_z: 2,
        }
    }

    pub fn head_dim(&self) -> usize {
        self.d_head.unwrap_or(self.d_model / self.n_heads.max(1))
    }

    pub fn n_global_heads(&self) -> usize {
        self.n_heads - self.n_local_heads
    }

    /// Total width of the concatenated head outputs (input to the attention
    /// output projection).
    pub fn attn_width(&self) -> usize {
        self.n_heads * self.head_dim()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.vocab_size == 0 || self.max_len == 0 || self.n_layers == 0 || self.d_model == 0 || self.d_ff == 0 {
            return bad("vocab_size, max_len, n_layers, d_model, d_ff must all be positive".into());
        }
        if self.n_heads == 0 {
            return bad("n_heads must be positive".into());
        }
        if self.n_local_heads > self.n_heads {
            return bad(format!("{} local heads exceed {} heads", self.n_local_heads, self.n_heads));
        }
        if self.d_model % self.n_heads != 0 {
            return bad(format!("d_model {} not divisible by {} heads", self.d_model, self.n_heads));
        }
        if self.head_dim() == 0 || self.head_dim() % 2 != 0 {
            return bad(format!("head width {} must be even for pairwise rotation", self.head_dim()));
        }
        if self.local_window == 0 {
            return bad("local_window must be at least 1".into());
        }
        if self.n_global_heads() > 0 && self.n_random_features == 0 {
            return bad("n_random_features must be positive when global heads exist".into());
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return bad(format!("dropout_rate {} outside [0,1)", self.dropout_rate));
        }
        if self.rope_base <= 0.0 {
            return bad(format!("rope_base {} must be positive", self.rope_base));
        }
        for (name, z) in [("age_z", self.age_z), ("year_z", self.year_z)] {
            if !matches!(z, 2 | 4) {
                return bad(format!("{name} {z} must be 2 or 4"));
            }
            if self.d_model % z != 0 {
                return bad(format!("d_model {} not divisible by {name} {z}", self.d_model));
            }
        }
        Ok(())
    }
}
