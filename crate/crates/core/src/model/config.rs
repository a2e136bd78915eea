use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub d_model: usize,
    pub n_blocks: usize,
    pub n_heads: usize,
    pub d_ffn: usize,
    /// `|C(l)|` per level; must match the fitted codebooks.
    pub level_sizes: Vec<usize>,
    /// Size of the learned positional table over context windows.
    pub max_history: usize,
    /// Cardinality of each static feature field.
    pub static_cardinalities: Vec<usize>,
    pub n_tags: usize,
    pub n_watch_buckets: usize,
    pub ln_eps: f64,
}

impl ModelConfig {
    /// Production-size settings: 4 blocks, width 512, 8 heads, FFN 1024,
    /// three 8192-entry codebooks.
    pub fn production() -> Self {
        Self {
            d_model: 512,
            n_blocks: 4,
            n_heads: 8,
            d_ffn: 1024,
            level_sizes: vec![8192; 3],
            max_history: 1000,
            ..Self::desk()
        }
    }

    pub fn desk() -> Self {
        Self {
            d_model: 64,
            n_blocks: 2,
            n_heads: 4,
            d_ffn: 128,
            level_sizes: vec![16, 8, 8],
            max_history: 100,
            static_cardinalities: vec![6, 3, 8],
            n_tags: 3,
            n_watch_buckets: 4,
            ln_eps: 1e-5,
        }
    }

    pub fn depth(&self) -> usize {
        self.level_sizes.len()
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0 || self.n_heads == 0 || self.d_model % self.n_heads != 0 {
            return Err(Error::Config(format!(
                "d_model {} must be a positive multiple of n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if self.level_sizes.is_empty() || self.level_sizes.contains(&0) {
            return Err(Error::Config("level_sizes must be non-empty and positive".into()));
        }
        if self.d_ffn == 0 || self.max_history == 0 {
            return Err(Error::Config("d_ffn and max_history must be positive".into()));
        }
        if self.n_tags == 0 || self.n_watch_buckets == 0 || self.static_cardinalities.contains(&0) {
            return Err(Error::Config("feature cardinalities must be positive".into()));
        }
        Ok(())
    }
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::desk()
    }
}
