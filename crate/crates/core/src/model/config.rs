use serde::{Deserialize, Serialize};

use crate::cmr::{MemoryShape, RETRIEVAL_EPSILON};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    /// Memory read inside every decoder cross-attention.
    #[value(name = "encdec")]
    EncDec,
    /// Memory read inside every (causal) self-attention.
    #[value(name = "deconly")]
    DecOnly,
}

fn default_epsilon() -> f64 {
    RETRIEVAL_EPSILON
}

fn default_true() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub variant: Variant,
    pub d_model: usize,
    pub num_heads: usize,
    pub num_layers: usize,
    pub vocab_size: usize,
    pub max_seq_len: usize,
    pub ff_dim: usize,
    pub seed: u64,
    #[serde(default = "default_true")]
    pub tie_embeddings: bool,
    /// Denominator guard of the memory read.
    #[serde(default = "default_epsilon")]
    pub epsilon: f64,
    /// Store a demonstration's filled template after its context, instead of
    /// the context alone.
    #[serde(default)]
    pub store_target: bool,
}

impl ModelConfig {
    /// The desk-scale configuration used by the CLI defaults.
    pub fn tiny(variant: Variant, vocab_size: usize, seed: u64) -> Self {
        Self {
            variant,
            d_model: 32,
            num_heads: 4,
            num_layers: 2,
            vocab_size,
            max_seq_len: 192,
            ff_dim: 64,
            seed,
            tie_embeddings: true,
            epsilon: RETRIEVAL_EPSILON,
            store_target: false,
        }
    }

    pub fn validate(&self) -> Result<(), String> {
        if self.num_heads == 0 || !self.d_model.is_multiple_of(self.num_heads) {
            return Err(format!(
                "d_model {} is not divisible by num_heads {}",
                self.d_model, self.num_heads
            ));
        }
        if self.num_layers == 0 || self.vocab_size == 0 || self.max_seq_len == 0 || self.ff_dim == 0 {
            return Err("layers, vocabulary, sequence length and feed-forward width must be positive".into());
        }
        if self.epsilon.is_nan() || self.epsilon < 0.0 {
            return Err(format!("epsilon must be non-negative, got {}", self.epsilon));
        }
        Ok(())
    }

    pub fn d_head(&self) -> usize {
        self.d_model / self.num_heads
    }

    pub fn memory_shape(&self) -> MemoryShape {
        MemoryShape {
            num_layers: self.num_layers,
            num_heads: self.num_heads,
            d_k: self.d_head(),
            d_v: self.d_head(),
        }
    }
}
