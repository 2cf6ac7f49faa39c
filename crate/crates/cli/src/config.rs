//! Run configuration. One JSON document; every field has a default and
//! unknown keys are rejected. Command-line flags are applied on top of the
//! file by [`Overrides::apply`].

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use candle_core::DType;
use serde::{Deserialize, Serialize};
use uwkit_core::encoder::normalize_tap_layers;
use uwkit_core::optim::AdamWConfig;
use uwkit_core::{AugmentConfig, DistillConfig, EncoderConfig, ModelConfig, SceneConfig};

/// Environment variable naming the default corpus root.
pub const DATA_ROOT_ENV: &str = "UWKIT_DATA_ROOT";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    /// Training corpus directory (`annotations.json` + `images/`). When
    /// unset, `UWKIT_DATA_ROOT` is consulted, then a synthetic corpus is
    /// generated in memory.
    pub root: Option<PathBuf>,
    /// Held-out corpus directory. Defaults to `<root>/val` when that exists.
    pub holdout_root: Option<PathBuf>,
    pub scene: SceneConfig,
    /// Seed of the synthetic corpus, kept apart from the training seed so
    /// several training seeds see the same data.
    pub seed: u64,
    pub train_images: usize,
    pub holdout_images: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            root: None,
            holdout_root: None,
            scene: SceneConfig::default(),
            seed: 7,
            train_images: 128,
            holdout_images: 32,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    F32,
    F64,
}

impl Precision {
    pub fn dtype(self) -> DType {
        match self {
            Precision::F32 => DType::F32,
            Precision::F64 => DType::F64,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    /// Stop after this many optimizer steps even if epochs remain.
    pub max_steps: Option<u64>,
    pub precision: Precision,
    /// Write a checkpoint at the end of every epoch.
    pub checkpoint_every_epoch: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 20,
            batch_size: 8,
            max_steps: None,
            precision: Precision::F32,
            checkpoint_every_epoch: true,
        }
    }
}

impl TrainConfig {
    pub fn steps_per_epoch(&self, n: usize) -> u64 {
        n.div_ceil(self.batch_size.max(1)) as u64
    }

    pub fn total_steps(&self, n: usize) -> u64 {
        let full = self.steps_per_epoch(n) * self.epochs as u64;
        self.max_steps.map_or(full, |m| m.min(full))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub batch_size: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { batch_size: 8 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub out: PathBuf,
    pub data: DataConfig,
    pub teacher: EncoderConfig,
    pub student: EncoderConfig,
    pub model: ModelConfig,
    pub distill: DistillConfig,
    pub optim: AdamWConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
    pub augment: AugmentConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            out: PathBuf::from("runs"),
            data: DataConfig::default(),
            teacher: EncoderConfig::teacher(),
            student: EncoderConfig::student(),
            model: ModelConfig::default(),
            distill: DistillConfig::default(),
            optim: AdamWConfig::default(),
            train: TrainConfig::default(),
            eval: EvalConfig::default(),
            augment: AugmentConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        Self::from_json(&text).with_context(|| format!("parsing config {}", path.display()))
    }

    pub fn validate(&self) -> Result<()> {
        self.teacher.validate()?;
        self.student.validate()?;
        self.data.scene.validate()?;
        self.augment.validate()?;
        self.model.eupg.validate()?;
        self.model.decoder.validate()?;
        if self.teacher.image_size != self.student.image_size || self.teacher.grid() != self.student.grid() {
            bail!("teacher and student must share image size and patch grid");
        }
        if self.model.num_classes != self.data.scene.num_classes {
            bail!(
                "model has {} classes but the synthetic scene config has {}",
                self.model.num_classes,
                self.data.scene.num_classes
            );
        }
        normalize_tap_layers(&self.distill.tap_layers, self.student.depth)?;
        if self.train.batch_size == 0 || self.eval.batch_size == 0 {
            bail!("batch sizes must be positive");
        }
        if !(self.optim.lr > 0.0) {
            bail!("learning rate must be positive");
        }
        Ok(())
    }

    /// Training corpus root: config value, then the environment.
    pub fn data_root(&self) -> Option<PathBuf> {
        self.data
            .root
            .clone()
            .or_else(|| std::env::var_os(DATA_ROOT_ENV).filter(|v| !v.is_empty()).map(PathBuf::from))
    }
}

/// Values given on the command line. They take precedence over the file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
}

impl Overrides {
    pub fn apply(&self, cfg: &mut RunConfig) {
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        if let Some(o) = &self.out {
            cfg.out = o.clone();
        }
    }
}

/// Defaults, then the optional file, then the overrides.
pub fn resolve(path: Option<&Path>, overrides: &Overrides) -> Result<RunConfig> {
    let mut cfg = match path {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    overrides.apply(&mut cfg);
    cfg.validate()?;
    Ok(cfg)
}
