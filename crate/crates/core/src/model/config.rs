use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};

/// Architectural hyperparameters, including the insertion layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub d_model: usize,
    pub d_ff: usize,
    pub n_heads: usize,
    pub vocab_size: usize,
    pub max_positions: usize,
    /// First block that sees multimodal tokens; 0 is the conventional layout.
    pub insert_layer: usize,
}

pub const NORM_EPS: f32 = 1e-5;

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_layers == 0 || self.d_model == 0 || self.n_heads == 0 || self.vocab_size == 0 {
            return Err(invalid(format!("degenerate model config {self:?}")));
        }
        if self.d_model % self.n_heads != 0 {
            return Err(invalid(format!(
                "d_model {} not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if self.head_dim() % 2 != 0 {
            return Err(invalid(format!("head dim {} must be even for rotary", self.head_dim())));
        }
        if self.insert_layer > self.n_layers {
            return Err(invalid(format!(
                "insert_layer {} exceeds n_layers {}",
                self.insert_layer, self.n_layers
            )));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn with_insert_layer(mut self, layer: usize) -> Self {
        self.insert_layer = layer;
        self
    }
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            n_layers: 8,
            d_model: 64,
            d_ff: 256,
            n_heads: 4,
            vocab_size: 64,
            max_positions: 64,
            insert_layer: 0,
        }
    }
}
