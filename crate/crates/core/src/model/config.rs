use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tokenizer::VOCAB_SIZE;

/// Shape of the miniature decoder.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    /// Key/value heads; each is shared by `n_heads / n_kv_heads` query heads.
    pub n_kv_heads: usize,
    /// Attention span in tokens, including the current position.
    pub window: usize,
    pub d_ff: usize,
    pub vocab: usize,
    pub max_seq: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl ModelConfig {
    /// Desk-scale default. Two layers of this window reach back over both caption
    /// lists of a rendered prompt; `max_seq` fits the verbatim instructions.
    pub fn desk() -> Self {
        Self {
            d_model: 64,
            n_layers: 2,
            n_heads: 4,
            n_kv_heads: 2,
            window: 160,
            d_ff: 256,
            vocab: VOCAB_SIZE,
            max_seq: 1024,
        }
    }

    /// Tiny configuration used for gradient checking.
    pub fn tiny() -> Self {
        Self {
            d_model: 16,
            n_layers: 1,
            n_heads: 4,
            n_kv_heads: 2,
            window: 4,
            d_ff: 32,
            vocab: VOCAB_SIZE,
            max_seq: 64,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let err = |m: String| Err(Error::Config(m));
        if self.d_model == 0 || self.n_layers == 0 || self.n_heads == 0 || self.n_kv_heads == 0 {
            return err(format!("model dimensions must be positive: {self:?}"));
        }
        if !self.n_heads.is_multiple_of(self.n_kv_heads) {
            return err(format!(
                "n_heads ({}) must be a multiple of n_kv_heads ({})",
                self.n_heads, self.n_kv_heads
            ));
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return err(format!(
                "d_model ({}) must be divisible by n_heads ({})",
                self.d_model, self.n_heads
            ));
        }
        if self.window == 0 {
            return err("window must be at least 1".into());
        }
        if self.d_ff == 0 || self.max_seq == 0 {
            return err("d_ff and max_seq must be positive".into());
        }
        if self.vocab != VOCAB_SIZE {
            return err(format!("vocab must be {VOCAB_SIZE}, got {}", self.vocab));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn kv_dim(&self) -> usize {
        self.n_kv_heads * self.head_dim()
    }

    /// Query heads per key/value head.
    pub fn group_size(&self) -> usize {
        self.n_heads / self.n_kv_heads
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn divisibility_is_enforced() {
        let cfg = ModelConfig {
            n_heads: 4,
            n_kv_heads: 5,
            ..ModelConfig::desk()
        };
        assert!(cfg
            .validate()
            .unwrap_err()
            .to_string()
            .contains("multiple of n_kv_heads"));
        let cfg = ModelConfig {
            d_model: 30,
            ..ModelConfig::desk()
        };
        assert!(cfg.validate().is_err());
        let cfg = ModelConfig {
            window: 0,
            ..ModelConfig::desk()
        };
        assert!(cfg.validate().is_err());
        ModelConfig::desk().validate().unwrap();
        ModelConfig::tiny().validate().unwrap();
    }
}
