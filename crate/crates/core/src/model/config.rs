use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};

/// Architecture of one encoder. `embed_dim` always equals `hidden_dim`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub num_layers: usize,
    pub hidden_dim: usize,
    pub num_heads: usize,
    pub ffn_dim: usize,
    pub vocab_size: usize,
    pub max_seq_len: usize,
    pub num_classes: usize,
    /// Dropout on both sub-layer outputs during training. Evaluation never drops.
    #[serde(default)]
    pub dropout: f64,
}

impl ModelConfig {
    /// `layers/hidden` preset with 64-wide heads and a 4x FFN, e.g. `(12, 768)`.
    pub fn preset(num_layers: usize, hidden_dim: usize) -> Self {
        Self {
            num_layers,
            hidden_dim,
            num_heads: (hidden_dim / 64).max(1),
            ffn_dim: 4 * hidden_dim,
            vocab_size: 30522,
            max_seq_len: 128,
            num_classes: 2,
            dropout: 0.0,
        }
    }

    pub fn head_dim(&self) -> usize {
        self.hidden_dim / self.num_heads
    }

    pub fn embed_dim(&self) -> usize {
        self.hidden_dim
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("num_layers", self.num_layers),
            ("hidden_dim", self.hidden_dim),
            ("num_heads", self.num_heads),
            ("ffn_dim", self.ffn_dim),
            ("vocab_size", self.vocab_size),
            ("max_seq_len", self.max_seq_len),
            ("num_classes", self.num_classes),
        ];
        for (name, v) in positive {
            if v == 0 {
                return invalid(format!("{name} must be positive"));
            }
        }
        if self.hidden_dim % self.num_heads != 0 {
            return invalid(format!(
                "hidden_dim {} not divisible by num_heads {}",
                self.hidden_dim, self.num_heads
            ));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return invalid(format!("dropout {} outside [0, 1)", self.dropout));
        }
        Ok(())
    }
}
