//! JSON run configuration read by the command-line tool.
//!
//! Every section and field is optional except `schema_version`. Missing model
//! fields take the toy defaults (`ModelConfig::toy`), missing dataset fields
//! follow the model (image size, channels, classes) or
//! `SyntheticDatasetSpec::default`, and missing training fields follow
//! `TrainSpec::default`. Unknown keys are errors at every level.
//!
//! ```json
//! {
//!   "schema_version": 1,
//!   "model": { "depth": 6, "merger": { "placement": 3, "output_tokens": 8 } },
//!   "dataset": { "samples_per_class": 200, "seed": 0 },
//!   "optimizer": { "lr": 0.001 },
//!   "training": { "steps": 2000, "batch_size": 64, "seed": 0 },
//!   "sweep": { "placements": [1, 2, 3, 4, 5, 6], "token_counts": [1, 2, 4, 8, 16] }
//! }
//! ```

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::experiments::{AdamConfig, SyntheticDatasetSpec, TrainSpec};
use crate::merger::MergerConfig;
use crate::vit::{ModelConfig, Pooling};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    pub image_size: Option<usize>,
    pub patch_size: Option<usize>,
    pub channels: Option<usize>,
    pub hidden_dim: Option<usize>,
    pub depth: Option<usize>,
    pub num_heads: Option<usize>,
    pub mlp_dim: Option<usize>,
    pub num_classes: Option<usize>,
    pub use_cls_token: Option<bool>,
    pub merger: Option<MergerConfig>,
    /// `"cls"` or `"mean"`; see `ModelConfig::pooling`.
    pub pooling: Option<Pooling>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSection {
    pub image_size: Option<usize>,
    pub channels: Option<usize>,
    pub num_classes: Option<usize>,
    pub samples_per_class: Option<usize>,
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainingSection {
    pub batch_size: Option<usize>,
    pub steps: Option<usize>,
    pub seed: Option<u64>,
    pub eval_fraction: Option<f64>,
    pub eval_every: Option<usize>,
    pub head_only: Option<bool>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSection {
    /// Defaults to every block index.
    pub placements: Option<Vec<usize>>,
    /// Defaults to [`DEFAULT_TOKEN_COUNTS`].
    pub token_counts: Option<Vec<usize>>,
    /// Output tokens used by the placement sweep, default 8.
    pub output_tokens: Option<usize>,
    /// Placement used by the token sweep, default mid-network.
    pub placement: Option<usize>,
}

pub const DEFAULT_TOKEN_COUNTS: [usize; 5] = [1, 2, 4, 8, 16];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfigFile {
    pub schema_version: u32,
    #[serde(default)]
    pub model: ModelSection,
    #[serde(default)]
    pub dataset: DatasetSection,
    #[serde(default)]
    pub optimizer: AdamConfig,
    #[serde(default)]
    pub training: TrainingSection,
    #[serde(default)]
    pub sweep: SweepSection,
}

impl Default for RunConfigFile {
    fn default() -> Self {
        Self {
            schema_version: SCHEMA_VERSION,
            model: ModelSection::default(),
            dataset: DatasetSection::default(),
            optimizer: AdamConfig::default(),
            training: TrainingSection::default(),
            sweep: SweepSection::default(),
        }
    }
}

impl RunConfigFile {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text)
            .map_err(|e| Error::config(format!("invalid run config: {e}")))?;
        if cfg.schema_version != SCHEMA_VERSION {
            return Err(Error::config(format!(
                "schema_version {} is not supported (expected {SCHEMA_VERSION})",
                cfg.schema_version
            )));
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn model_config(&self) -> Result<ModelConfig> {
        let t = ModelConfig::toy();
        let m = &self.model;
        let cfg = ModelConfig {
            image_size: m.image_size.unwrap_or(t.image_size),
            patch_size: m.patch_size.unwrap_or(t.patch_size),
            channels: m.channels.unwrap_or(t.channels),
            hidden_dim: m.hidden_dim.unwrap_or(t.hidden_dim),
            depth: m.depth.unwrap_or(t.depth),
            num_heads: m.num_heads.unwrap_or(t.num_heads),
            mlp_dim: m.mlp_dim.unwrap_or(t.mlp_dim),
            num_classes: m.num_classes.unwrap_or(t.num_classes),
            use_cls_token: m.use_cls_token.unwrap_or(t.use_cls_token),
            merger: m.merger,
            pooling: m.pooling,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn train_spec(&self) -> Result<TrainSpec> {
        let model = self.model_config()?;
        let d = SyntheticDatasetSpec::default();
        let ds = &self.dataset;
        let dataset = SyntheticDatasetSpec {
            image_size: ds.image_size.unwrap_or(model.image_size),
            channels: ds.channels.unwrap_or(model.channels),
            num_classes: ds.num_classes.unwrap_or(model.num_classes),
            samples_per_class: ds.samples_per_class.unwrap_or(d.samples_per_class),
            seed: ds.seed.unwrap_or(d.seed),
        };
        let t = TrainSpec::default();
        let tr = &self.training;
        let spec = TrainSpec {
            model,
            dataset,
            optimizer: self.optimizer.clone(),
            batch_size: tr.batch_size.unwrap_or(t.batch_size),
            steps: tr.steps.unwrap_or(t.steps),
            seed: tr.seed.unwrap_or(t.seed),
            eval_fraction: tr.eval_fraction.unwrap_or(t.eval_fraction),
            eval_every: tr.eval_every.unwrap_or(t.eval_every),
            head_only: tr.head_only.unwrap_or(t.head_only),
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn placements(&self, depth: usize) -> Vec<usize> {
        self.sweep.placements.clone().unwrap_or_else(|| (1..=depth).collect())
    }

    pub fn token_counts(&self) -> Vec<usize> {
        self.sweep.token_counts.clone().unwrap_or_else(|| DEFAULT_TOKEN_COUNTS.to_vec())
    }
}
