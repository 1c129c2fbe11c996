//! File-based run configuration: one JSON document with per-subsystem
//! sections. Unknown keys are rejected, every field has a default, and
//! the seed is mandatory (no wall-clock fallback). Flag values override
//! file values, which override defaults.

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::path::Path;

use tcnet_core::data::{BenchmarkConfig, KlOptions, TabularSchema, DEFAULT_GROUP_SIZES};
use tcnet_core::explain::LimeConfig;
use tcnet_core::losses::LossConfig;
use tcnet_core::model::ModelConfig;
use tcnet_core::oversample::Strategy;
use tcnet_core::train::TrainConfig;

/// Model section: [`ModelConfig`] with an optional token count that
/// defaults to the schema's feature count.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub token_count: Option<usize>,
    pub d_model: usize,
    pub heads: usize,
    pub encoder_blocks: usize,
    pub ffn_hidden: usize,
    pub trunk_widths: Vec<usize>,
    pub layer_norm_eps: f64,
}

impl Default for ModelSection {
    fn default() -> Self {
        let base = ModelConfig::default();
        ModelSection {
            token_count: None,
            d_model: base.d_model,
            heads: base.heads,
            encoder_blocks: base.encoder_blocks,
            ffn_hidden: base.ffn_hidden,
            trunk_widths: base.trunk_widths,
            layer_norm_eps: base.layer_norm_eps,
        }
    }
}

impl ModelSection {
    pub fn resolve(&self, schema: &TabularSchema) -> ModelConfig {
        ModelConfig {
            token_count: self.token_count.unwrap_or_else(|| schema.feature_count()),
            d_model: self.d_model,
            heads: self.heads,
            encoder_blocks: self.encoder_blocks,
            ffn_hidden: self.ffn_hidden,
            trunk_widths: self.trunk_widths.clone(),
            layer_norm_eps: self.layer_norm_eps,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub max_epochs: usize,
    pub batch_size: usize,
    pub initial_lr: f64,
    pub lr_decay_gamma: f64,
    pub early_stop_patience: usize,
    pub momentum: f64,
}

impl Default for TrainSection {
    fn default() -> Self {
        let base = TrainConfig::default();
        TrainSection {
            max_epochs: base.max_epochs,
            batch_size: base.batch_size,
            initial_lr: base.initial_lr,
            lr_decay_gamma: base.lr_decay_gamma,
            early_stop_patience: base.early_stop_patience,
            momentum: base.momentum,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OversampleSection {
    pub strategy: Strategy,
    pub mode_count: usize,
    /// Rows to generate; when absent the --count or --match-source flag
    /// decides.
    pub count: Option<usize>,
}

impl Default for OversampleSection {
    fn default() -> Self {
        OversampleSection {
            strategy: Strategy::ConditionalMixture,
            mode_count: tcnet_core::oversample::DEFAULT_MODE_COUNT,
            count: None,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    pub train_fraction: f64,
    pub group_sizes: Vec<usize>,
    pub kl: KlOptions,
}

impl Default for DataSection {
    fn default() -> Self {
        DataSection {
            train_fraction: 0.8,
            group_sizes: DEFAULT_GROUP_SIZES.to_vec(),
            kl: KlOptions::default(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepSection {
    /// Fixed λ grid; default {0.1, 0.15, …, 1.0}.
    pub grid: Vec<f64>,
    pub include_epoch_varying: bool,
}

impl Default for SweepSection {
    fn default() -> Self {
        SweepSection {
            grid: (0..19).map(|i| 0.1 + 0.05 * i as f64).collect(),
            include_epoch_varying: true,
        }
    }
}

/// The whole run configuration file.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// Root seed; mandatory so every run is reproducible.
    pub seed: u64,
    #[serde(default)]
    pub model: ModelSection,
    #[serde(default)]
    pub train: TrainSection,
    #[serde(default)]
    pub loss: LossConfig,
    #[serde(default)]
    pub lime: LimeConfig,
    #[serde(default)]
    pub benchmark: BenchmarkConfig,
    #[serde(default)]
    pub oversample: OversampleSection,
    #[serde(default)]
    pub data: DataSection,
    #[serde(default)]
    pub sweep: SweepSection,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("cannot read config {}", path.display()))?;
        let cfg: RunConfig = serde_json::from_str(&text)
            .with_context(|| format!("bad config {}", path.display()))?;
        Ok(cfg)
    }

    /// Effective benchmark config: section seed falls back to the root.
    pub fn benchmark_config(&self) -> BenchmarkConfig {
        let mut cfg = self.benchmark.clone();
        if cfg.seed.is_none() {
            cfg.seed = Some(self.seed);
        }
        cfg
    }

    /// Effective train config for a schema.
    pub fn train_config(&self, schema: &TabularSchema) -> TrainConfig {
        TrainConfig {
            max_epochs: self.train.max_epochs,
            batch_size: self.train.batch_size,
            initial_lr: self.train.initial_lr,
            lr_decay_gamma: self.train.lr_decay_gamma,
            early_stop_patience: self.train.early_stop_patience,
            momentum: self.train.momentum,
            seed: self.seed,
            loss: self.loss,
            model: self.model.resolve(schema),
        }
    }

    /// Canonical compact JSON of the effective (post-default) config.
    pub fn canonical_json(&self) -> String {
        serde_json::to_string(self).expect("config serialization cannot fail")
    }

    pub fn digest(&self) -> String {
        Sha256::digest(self.canonical_json().as_bytes())
            .iter()
            .map(|b| format!("{b:02x}"))
            .collect()
    }

    pub fn echo(&self) -> serde_json::Value {
        serde_json::from_str(&self.canonical_json()).expect("config round trip")
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.data.train_fraction > 0.0 && self.data.train_fraction < 1.0) {
            bail!("data.train_fraction must lie in (0, 1)");
        }
        if self.data.group_sizes.is_empty() {
            bail!("data.group_sizes must be non-empty");
        }
        Ok(())
    }
}
