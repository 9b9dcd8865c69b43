// SPDX-License-Identifier: MIT OR Apache-2.0

//! Model configuration and the supported architecture families.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Wiring of a decoder-only transformer block.
///
/// The family is declared in the config file; it is never inferred from
/// tensor names.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Architecture {
    /// GPT-2 style: LayerNorm before each sublayer, learned absolute
    /// positions, GELU MLP, tied unembedding.
    PreLayerNormLearnedPositions,
    /// LLaMA style: RMSNorm, rotary positions, SiLU-gated MLP.
    RmsNormRotaryGatedMlp,
}

fn default_rope_theta() -> f32 {
    10_000.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub architecture: Architecture,
    pub n_layers: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub head_dim: usize,
    /// Hidden width of the MLP.
    pub d_ff: usize,
    pub vocab_size: usize,
    pub max_context: usize,
    pub norm_epsilon: f32,
    #[serde(default = "default_rope_theta")]
    pub rope_theta: f32,
    /// Generation stops early when this token is produced.
    #[serde(default)]
    pub eos_token_id: Option<u32>,
}

impl ModelConfig {
    pub fn from_file(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let config: ModelConfig = serde_json::from_str(&text)?;
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_layers == 0 {
            return Err(Error::Config("n_layers must be at least 1".into()));
        }
        if self.vocab_size == 0 {
            return Err(Error::Config("vocab_size must be at least 1".into()));
        }
        if self.n_heads == 0 || self.n_heads * self.head_dim != self.d_model {
            return Err(Error::Config(format!(
                "n_heads ({}) x head_dim ({}) must equal d_model ({})",
                self.n_heads, self.head_dim, self.d_model
            )));
        }
        if self.architecture == Architecture::RmsNormRotaryGatedMlp && self.head_dim % 2 != 0 {
            return Err(Error::Config("rotary embeddings need an even head_dim".into()));
        }
        if self.d_ff == 0 || self.max_context == 0 {
            return Err(Error::Config("d_ff and max_context must be positive".into()));
        }
        if !(self.norm_epsilon > 0.0) {
            return Err(Error::Config("norm_epsilon must be positive".into()));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn base() -> ModelConfig {
        ModelConfig {
            architecture: Architecture::PreLayerNormLearnedPositions,
            n_layers: 2,
            d_model: 8,
            n_heads: 2,
            head_dim: 4,
            d_ff: 16,
            vocab_size: 10,
            max_context: 16,
            norm_epsilon: 1e-5,
            rope_theta: 10_000.0,
            eos_token_id: None,
        }
    }

    #[test]
    fn rejects_head_product_mismatch() {
        let mut c = base();
        c.head_dim = 3;
        assert!(matches!(c.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn rejects_zero_layers_and_vocab() {
        let mut c = base();
        c.n_layers = 0;
        assert!(c.validate().is_err());
        let mut c = base();
        c.vocab_size = 0;
        assert!(c.validate().is_err());
    }

    #[test]
    fn family_names_round_trip_through_json() {
        let json = r#"{"architecture":"rms_norm_rotary_gated_mlp","n_layers":1,"d_model":4,
            "n_heads":1,"head_dim":4,"d_ff":8,"vocab_size":3,"max_context":8,"norm_epsilon":1e-6}"#;
        let c: ModelConfig = serde_json::from_str(json).unwrap();
        assert_eq!(c.architecture, Architecture::RmsNormRotaryGatedMlp);
        assert_eq!(c.rope_theta, 10_000.0);
        c.validate().unwrap();
    }
}
