//! Experiment configuration: one TOML document with `data`, `model`,
//! `cluster`, `train` and `output` sections.
//!
//! Every field has a default, so an empty document is valid and describes
//! the standard benchmark. Unknown keys are rejected with the line and key
//! that caused them.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::ams::{ClusterConfig, TrainOptions};
use crate::data::SyntheticConfig;
use crate::deployment::Warmup;
use crate::error::{Error, Result};
use crate::model::{AggregatorKind, AggregatorSpec, Architecture, FeatureSchema, ModelConfig, Normalization};
use crate::numerics::{AdamConfig, LrSchedule};

/// File name of the resolved configuration written beside every output.
pub const RESOLVED_CONFIG: &str = "config.resolved.toml";

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub data: SyntheticConfig,
    pub model: ModelSection,
    pub cluster: ClusterConfig,
    pub train: TrainSection,
    pub output: OutputSection,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ArchitectureKind {
    Dicm,
    TwoTower,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    pub architecture: ArchitectureKind,
    pub aggregator: AggregatorKind,
    pub normalization: Normalization,
    pub attention_hidden: usize,
    pub mlp_hidden: Vec<usize>,
    pub tower_hidden: usize,
    pub user_width: usize,
    pub ad_width: usize,
    pub id_dim: usize,
    pub raw_dim: usize,
    pub image_dim: usize,
    pub image_hidden: Option<[usize; 2]>,
    pub use_ad_image: bool,
    pub use_behavior_images: bool,
    pub id_init_scale: f64,
    pub extractor_seed: u64,
    /// Parameter initialization seed.
    pub seed: u64,
}

impl Default for ModelSection {
    fn default() -> Self {
        let schema = FeatureSchema::standard(1, 1, 1, 1);
        let dicm = ModelConfig::dicm(schema.clone(), AggregatorKind::AttentivePooling);
        let (mlp_hidden, spec) = match dicm.architecture {
            Architecture::Dicm { mlp_hidden, aggregator } => (mlp_hidden, aggregator),
            Architecture::TwoTower { .. } => unreachable!("dicm constructor"),
        };
        let Architecture::TwoTower {
            tower_hidden,
            user_width,
            ad_width,
        } = ModelConfig::two_tower(schema.clone()).architecture
        else {
            unreachable!("two-tower constructor")
        };
        Self {
            architecture: ArchitectureKind::Dicm,
            aggregator: spec.kind,
            normalization: spec.normalization,
            attention_hidden: spec.attention_hidden,
            mlp_hidden,
            tower_hidden,
            user_width,
            ad_width,
            id_dim: schema.id_dim,
            raw_dim: schema.raw_dim,
            image_dim: schema.image_dim,
            image_hidden: dicm.image_hidden,
            use_ad_image: true,
            use_behavior_images: true,
            id_init_scale: dicm.id_init_scale,
            extractor_seed: dicm.extractor_seed,
            seed: 7,
        }
    }
}

impl ModelSection {
    /// The network description for a dataset generated from `data`.
    pub fn build(&self, data: &SyntheticConfig) -> ModelConfig {
        let mut schema = data.schema();
        schema.id_dim = self.id_dim;
        schema.raw_dim = self.raw_dim;
        schema.image_dim = self.image_dim;
        let architecture = match self.architecture {
            ArchitectureKind::Dicm => Architecture::Dicm {
                aggregator: AggregatorSpec {
                    kind: self.aggregator,
                    attention_hidden: self.attention_hidden,
                    normalization: self.normalization,
                },
                mlp_hidden: self.mlp_hidden.clone(),
            },
            ArchitectureKind::TwoTower => Architecture::TwoTower {
                tower_hidden: self.tower_hidden,
                user_width: self.user_width,
                ad_width: self.ad_width,
            },
        };
        ModelConfig {
            schema,
            architecture,
            use_ad_image: self.use_ad_image,
            use_behavior_images: self.use_behavior_images,
            image_hidden: self.image_hidden,
            extractor_seed: self.extractor_seed,
            image_latent_dim: data.image_latent_dim,
            id_init_scale: self.id_init_scale,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    pub epochs: usize,
    pub lr: f64,
    pub lr_decay: f64,
    /// Iterations between learning-rate decays.
    pub lr_decay_interval: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub shuffle_seed: u64,
    pub max_iterations: Option<u64>,
    /// Which parameter groups to take from `init_checkpoint`.
    pub warmup: Warmup,
    pub init_checkpoint: Option<PathBuf>,
}

impl Default for TrainSection {
    fn default() -> Self {
        let schedule = LrSchedule::default();
        let adam = AdamConfig::default();
        Self {
            epochs: 3,
            lr: 0.004,
            lr_decay: schedule.decay,
            lr_decay_interval: schedule.interval,
            beta1: adam.beta1,
            beta2: adam.beta2,
            epsilon: adam.epsilon,
            shuffle_seed: 0,
            max_iterations: None,
            warmup: Warmup::Non,
            init_checkpoint: None,
        }
    }
}

impl TrainSection {
    pub fn options(&self) -> TrainOptions {
        TrainOptions {
            epochs: self.epochs,
            schedule: LrSchedule {
                initial: self.lr,
                decay: self.lr_decay,
                interval: self.lr_decay_interval,
            },
            adam: AdamConfig {
                beta1: self.beta1,
                beta2: self.beta2,
                epsilon: self.epsilon,
            },
            shuffle_seed: self.shuffle_seed,
            max_iterations: self.max_iterations,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OutputSection {
    pub dir: PathBuf,
}

impl Default for OutputSection {
    fn default() -> Self {
        Self {
            dir: PathBuf::from("out"),
        }
    }
}

impl ExperimentConfig {
    /// Parses a TOML document. `origin` names the source in error messages.
    pub fn from_toml(text: &str, origin: &str) -> Result<Self> {
        let config: Self = toml::from_str(text).map_err(|e| parse_error(text, origin, &e))?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text, &path.display().to_string())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("configuration serializes to TOML")
    }

    /// Writes the resolved configuration into `dir`.
    pub fn write_resolved(&self, dir: &Path) -> Result<PathBuf> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join(RESOLVED_CONFIG);
        std::fs::write(&path, self.to_toml()).map_err(|e| Error::io(&path, e))?;
        Ok(path)
    }

    pub fn validate(&self) -> Result<()> {
        self.data.validate()?;
        self.cluster.validate()?;
        self.model_config().schema.validate()?;
        if self.train.epochs == 0 {
            return Err(Error::Config("train.epochs must be at least 1".into()));
        }
        if !(self.train.lr > 0.0 && self.train.lr.is_finite()) {
            return Err(Error::Config("train.lr must be positive".into()));
        }
        if self.train.warmup != Warmup::Non && self.train.init_checkpoint.is_none() {
            return Err(Error::Config(format!(
                "train.warmup = \"{}\" needs train.init_checkpoint",
                self.train.warmup
            )));
        }
        Ok(())
    }

    pub fn model_config(&self) -> ModelConfig {
        self.model.build(&self.data)
    }
}

/// Turns a TOML error into a [`Error::ConfigParse`] naming the line and the
/// dotted key it sits under.
fn parse_error(text: &str, origin: &str, err: &toml::de::Error) -> Error {
    let offset = err.span().map_or(0, |s| s.start).min(text.len());
    let line = text[..offset].matches('\n').count() + 1;
    let mut section = String::new();
    for l in text.lines().take(line) {
        let t = l.trim();
        if t.starts_with('[') && t.ends_with(']') {
            section = t.trim_matches(|c| c == '[' || c == ']').trim().to_string();
        }
    }
    let current = text.lines().nth(line - 1).unwrap_or("").trim();
    let key = match current.split_once('=') {
        Some((k, _)) => k.trim().to_string(),
        None => current.trim_matches(|c| c == '[' || c == ']').trim().to_string(),
    };
    let key = match (section.is_empty(), key.is_empty() || key == section) {
        (_, true) => section,
        (true, false) => key,
        (false, false) => format!("{section}.{key}"),
    };
    Error::ConfigParse {
        path: origin.to_string(),
        line,
        key,
        message: err.message().to_string(),
    }
}
