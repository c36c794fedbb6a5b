//! TOML run configuration.
//!
//! A run file describes one training run end to end: model geometry under
//! `[model]`, the token pipeline and its growth schedule under `[pipeline]`,
//! optimizer settings under `[train]`, and the data source under `[data]`.
//! Every field has a default, so the empty document is a valid desk-scale
//! run; unknown keys are rejected with the offending line and column.
//!
//! The resolved configuration can be echoed back with
//! [`RunConfig::effective_toml`], which makes the defaults explicit — the
//! echo itself parses back to the identical configuration.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{load_directory, synthetic, Dataset, SyntheticSpec};
use crate::distance::DistanceMetric;
use crate::error::{Error, Result};
use crate::optim::OptimizerKind;
use crate::pipeline::PipelineConfig;
use crate::schedule::GrowthSchedule;
use crate::trainer::TrainConfig;
use crate::vit::ModelConfig;

/// Model geometry. Defaults describe the desk-scale model used throughout
/// the test suite: 16×16 single-channel images in 4×4 patches, two blocks.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub image_size: usize,
    pub patch_size: usize,
    pub channels: usize,
    pub depth: usize,
    pub dim: usize,
    pub heads: usize,
    pub mlp_ratio: f64,
    pub num_classes: usize,
    /// Seed for parameter initialization.
    pub seed: u64,
}

impl Default for ModelSection {
    fn default() -> Self {
        ModelSection {
            image_size: 16,
            patch_size: 4,
            channels: 1,
            depth: 2,
            dim: 64,
            heads: 4,
            mlp_ratio: 2.0,
            num_classes: 10,
            seed: 0,
        }
    }
}

/// Token pipeline settings. `enabled = false` trains on the full sequence
/// (the baseline); everything else configures the growth schedule and the
/// reduction placement. The initial kept rate is always half the first-stage
/// rate and is not a separate knob.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineSection {
    pub enabled: bool,
    pub num_stages: usize,
    pub first_stage_rate: f64,
    pub repetition_steps: usize,
    pub metric: DistanceMetric,
    pub apply_after_block: usize,
    pub restore_indices: bool,
}

impl Default for PipelineSection {
    fn default() -> Self {
        PipelineSection {
            enabled: true,
            num_stages: 3,
            first_stage_rate: 0.5,
            repetition_steps: 2,
            metric: DistanceMetric::Cosine,
            apply_after_block: 1,
            restore_indices: false,
        }
    }
}

/// Optimization settings; mirrors [`TrainConfig`] plus the sampling seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub total_iterations: usize,
    pub batch_size: usize,
    pub optimizer: OptimizerKind,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub warmup_fraction: f64,
    pub min_lr_fraction: f64,
    pub eval_interval: usize,
    pub seed: u64,
}

impl Default for TrainSection {
    fn default() -> Self {
        let t = TrainConfig::default();
        TrainSection {
            total_iterations: t.total_iterations,
            batch_size: t.batch_size,
            optimizer: t.optimizer,
            learning_rate: t.learning_rate,
            weight_decay: t.weight_decay,
            warmup_fraction: t.warmup_fraction,
            min_lr_fraction: t.min_lr_fraction,
            eval_interval: t.eval_interval,
            seed: t.seed,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DataSource {
    /// Deterministic synthetic classes; see the `data` module.
    Synthetic,
    /// Image folders, one subdirectory per class.
    Directory,
}

/// Data source. The synthetic generator takes its geometry (classes, image
/// size, channels) from `[model]`; only the sample counts, noise level, and
/// seed live here. Directory sources need `train_dir` and `eval_dir`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    pub source: DataSource,
    pub train_samples: usize,
    pub eval_samples: usize,
    pub noise: f64,
    pub seed: u64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub train_dir: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub eval_dir: Option<PathBuf>,
}

impl Default for DataSection {
    fn default() -> Self {
        DataSection {
            source: DataSource::Synthetic,
            train_samples: 5000,
            eval_samples: 1000,
            noise: 0.5,
            seed: 1,
            train_dir: None,
            eval_dir: None,
        }
    }
}

/// A complete run description.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Where metrics, checkpoints, and the log go; `None` keeps everything
    /// in memory.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub output_dir: Option<PathBuf>,
    pub model: ModelSection,
    pub pipeline: PipelineSection,
    pub train: TrainSection,
    pub data: DataSection,
}

impl RunConfig {
    /// Parses a run file, mapping syntax and unknown-key errors to
    /// line-precise messages.
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let config: RunConfig =
            toml::from_str(text).map_err(|e| Error::Config(e.to_string().trim().to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn from_path(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::from_toml_str(&text)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    /// The fully resolved configuration as TOML, defaults included.
    pub fn effective_toml(&self) -> String {
        toml::to_string_pretty(self).expect("run config serializes")
    }

    /// Cross-field checks beyond what deserialization enforces.
    pub fn validate(&self) -> Result<()> {
        self.model_config()?.validate()?;
        self.train_config().validate()?;
        if self.data.source == DataSource::Directory
            && (self.data.train_dir.is_none() || self.data.eval_dir.is_none())
        {
            return Err(Error::Config(
                "data.source = \"directory\" requires train_dir and eval_dir".into(),
            ));
        }
        if self.data.source == DataSource::Synthetic
            && (self.data.train_samples == 0 || self.data.eval_samples == 0)
        {
            return Err(Error::Config("synthetic sample counts must be positive".into()));
        }
        Ok(())
    }

    /// The model geometry plus, when enabled, the pipeline configuration.
    pub fn model_config(&self) -> Result<ModelConfig> {
        let pipeline = if self.pipeline.enabled {
            let schedule = GrowthSchedule::new(
                self.pipeline.num_stages,
                self.pipeline.first_stage_rate,
                self.pipeline.repetition_steps,
            )?;
            Some(PipelineConfig {
                schedule,
                metric: self.pipeline.metric,
                apply_after_block: self.pipeline.apply_after_block,
                restore_indices: self.pipeline.restore_indices,
            })
        } else {
            None
        };
        Ok(ModelConfig {
            image_size: self.model.image_size,
            patch_size: self.model.patch_size,
            channels: self.model.channels,
            depth: self.model.depth,
            dim: self.model.dim,
            heads: self.model.heads,
            mlp_ratio: self.model.mlp_ratio,
            num_classes: self.model.num_classes,
            pipeline,
        })
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            total_iterations: self.train.total_iterations,
            batch_size: self.train.batch_size,
            optimizer: self.train.optimizer,
            learning_rate: self.train.learning_rate,
            weight_decay: self.train.weight_decay,
            warmup_fraction: self.train.warmup_fraction,
            min_lr_fraction: self.train.min_lr_fraction,
            eval_interval: self.train.eval_interval,
            seed: self.train.seed,
        }
    }

    /// Materializes `(train, eval)` datasets from the configured source.
    pub fn load_datasets(&self) -> Result<(Dataset, Dataset)> {
        match self.data.source {
            DataSource::Synthetic => synthetic(&SyntheticSpec {
                num_classes: self.model.num_classes,
                image_size: self.model.image_size,
                channels: self.model.channels,
                patch_size: self.model.patch_size,
                train_samples: self.data.train_samples,
                eval_samples: self.data.eval_samples,
                noise: self.data.noise,
                seed: self.data.seed,
            }),
            DataSource::Directory => {
                let train_dir = self.data.train_dir.as_ref().expect("validated");
                let eval_dir = self.data.eval_dir.as_ref().expect("validated");
                let train =
                    load_directory(train_dir, self.model.image_size, self.model.channels)?;
                let eval = load_directory(eval_dir, self.model.image_size, self.model.channels)?;
                if train.num_classes != self.model.num_classes {
                    return Err(Error::Config(format!(
                        "{} has {} classes; model expects {}",
                        train_dir.display(),
                        train.num_classes,
                        self.model.num_classes
                    )));
                }
                if eval.num_classes != train.num_classes {
                    return Err(Error::Config(format!(
                        "train and eval directories disagree on classes: {} vs {}",
                        train.num_classes, eval.num_classes
                    )));
                }
                Ok((train, eval))
            }
        }
    }
}
