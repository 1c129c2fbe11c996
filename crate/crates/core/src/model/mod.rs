//! The two-stream network: per-feature token embeddings, transformer
//! encoder block(s), a five-layer fully connected trunk, and a sigmoid
//! classifier head. Both streams share every weight; the forward pass
//! exposes deep features (for covariance alignment) and per-head
//! attention matrices (for interpretation).

mod checkpoint;
mod forward;
mod params;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, EncoderInfo, Provenance};
pub use forward::{
    bind_params, embed, encoder_block, forward, forward_two_stream, infer, multi_head_attention,
    trunk_forward, BoundParams, ForwardOutput, ForwardPass,
};
pub use params::{init_params, param_shapes, ModelParams};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::DataError;
use crate::numcore::NumError;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model config: {reason}")]
    InvalidConfig { reason: String },
    #[error("schema expects {expected} feature tokens, config has {got}")]
    SchemaMismatch { expected: usize, got: usize },
    #[error("input width {got} does not match encoded width {expected}")]
    EncodingMismatch { expected: usize, got: usize },
    #[error("training streams need equal batch sizes, got {source_rows} and {target_rows}")]
    BatchSizeMismatch { source_rows: usize, target_rows: usize },
    #[error("bad checkpoint: {reason}")]
    BadCheckpoint { reason: String },
    #[error("{path}: {reason}")]
    Io { path: String, reason: String },
    #[error(transparent)]
    Num(#[from] NumError),
    #[error(transparent)]
    Data(#[from] DataError),
}

/// Architecture hyperparameters. Defaults: 21 feature tokens, width 28
/// split over 7 heads, one encoder block, trunk [256,128,64,32,16].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub token_count: usize,
    pub d_model: usize,
    pub heads: usize,
    pub encoder_blocks: usize,
    pub ffn_hidden: usize,
    pub trunk_widths: Vec<usize>,
    pub layer_norm_eps: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        let d_model = 28;
        ModelConfig {
            token_count: 21,
            d_model,
            heads: 7,
            encoder_blocks: 1,
            ffn_hidden: 4 * d_model,
            trunk_widths: vec![256, 128, 64, 32, 16],
            layer_norm_eps: 1e-5,
        }
    }
}

impl ModelConfig {
    pub fn d_k(&self) -> usize {
        self.d_model / self.heads
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let fail = |reason: String| Err(ModelError::InvalidConfig { reason });
        if self.heads == 0 || self.d_model == 0 || self.token_count == 0 {
            return fail("token_count, d_model and heads must be positive".into());
        }
        if self.d_model % self.heads != 0 {
            return fail(format!(
                "d_model {} not divisible by heads {}",
                self.d_model, self.heads
            ));
        }
        if self.encoder_blocks == 0 {
            return fail("need at least one encoder block".into());
        }
        if self.ffn_hidden == 0 {
            return fail("ffn_hidden must be positive".into());
        }
        if self.trunk_widths.is_empty() || self.trunk_widths.iter().any(|&w| w == 0) {
            return fail("trunk widths must be positive".into());
        }
        if self.layer_norm_eps <= 0.0 {
            return fail("layer_norm_eps must be positive".into());
        }
        Ok(())
    }

    /// Width of the deep feature vector compared across streams.
    pub fn feature_width(&self) -> usize {
        *self.trunk_widths.last().expect("validated non-empty")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_config_is_valid() {
        let cfg = ModelConfig::default();
        cfg.validate().unwrap();
        assert_eq!(cfg.d_k(), 4);
        assert_eq!(cfg.feature_width(), 16);
        assert_eq!(cfg.trunk_widths.len(), 5);
    }

    #[test]
    fn indivisible_heads_rejected() {
        let cfg = ModelConfig {
            d_model: 10,
            heads: 3,
            ..ModelConfig::default()
        };
        assert!(cfg.validate().is_err());
    }
}
