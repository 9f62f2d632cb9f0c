//! Experiment configuration: one JSON document, individual keys overridable.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::augment::AugmentationSet;
use crate::error::{MastError, Result};
use crate::loss::{CoefficientOverrides, LossCoefficients, BASELINE_LAMBDA};
use crate::model::ModelConfig;
use crate::tensor::DType;

/// Training objective.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Objective {
    /// Masked subspaces with Gaussian embeddings.
    #[default]
    Mast,
    /// Unfactorized invariance + variance + covariance on the means.
    Baseline,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScheduleConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub base_lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Linear warmup over the first 2% of steps.
    pub warmup: bool,
    /// Checkpoint every this many epochs; 0 writes only the final one.
    pub ckpt_every: usize,
    /// Rescale the full gradient to at most this L2 norm; 0 disables.
    pub clip_norm: f64,
    /// Learning-rate multiplier for the mask parameters `U`.
    pub mask_lr_scale: f64,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self {
            epochs: 20,
            batch_size: 64,
            base_lr: 0.05,
            momentum: 0.9,
            weight_decay: 1e-6,
            warmup: true,
            ckpt_every: 0,
            clip_norm: 1.0,
            mask_lr_scale: 0.01,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProbeConfig {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub weight_decay: f64,
    /// Fraction of the dataset used for training the probe; the rest is test.
    pub train_fraction: f64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            epochs: 100,
            lr: 0.5,
            batch_size: 128,
            weight_decay: 1e-4,
            train_fraction: 0.8,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub dataset: PathBuf,
    pub output_dir: PathBuf,
    pub seed: u64,
    pub float_width: DType,
    pub model: ModelConfig,
    /// `mast5`, `mast15`, `mast19` or a comma-separated operator list.
    pub augmentations: String,
    pub objective: Objective,
    pub schedule: ScheduleConfig,
    pub loss: CoefficientOverrides,
    pub probe: ProbeConfig,
}

impl Default for Config {
    fn default() -> Self {
        Self {
            dataset: PathBuf::from("data"),
            output_dir: PathBuf::from("runs/default"),
            seed: 0,
            float_width: DType::F32,
            model: ModelConfig::default(),
            augmentations: "mast5".into(),
            objective: Objective::Mast,
            schedule: ScheduleConfig::default(),
            loss: CoefficientOverrides::default(),
            probe: ProbeConfig::default(),
        }
    }
}

impl Config {
    pub fn from_json(text: &str) -> Result<Self> {
        let c: Config = serde_json::from_str(text).map_err(|e| MastError::config("config", e.to_string()))?;
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| MastError::io("reading config", path, e))?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn augmentation_set(&self) -> Result<AugmentationSet> {
        AugmentationSet::named(&self.augmentations)
    }

    /// Number of subspaces `K` (the augmentation set size).
    pub fn k_max(&self) -> Result<usize> {
        Ok(self.augmentation_set()?.len())
    }

    /// Coefficients of the configured objective at the current `(d, K)`.
    pub fn coefficients(&self) -> Result<LossCoefficients> {
        let (d, k) = (self.model.embed_dim, self.k_max()?);
        Ok(match self.objective {
            Objective::Mast => self.loss.resolve(d, k),
            Objective::Baseline => {
                let base = self.loss.resolve(d, k);
                LossCoefficients {
                    lambda: self.loss.lambda.unwrap_or(BASELINE_LAMBDA / d as f64) * self.loss.scale.unwrap_or(1.0),
                    lambda1: 0.0,
                    lambda2: 0.0,
                    ..base
                }
            }
        })
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        let set = self.augmentation_set()?;
        if set.len() > self.model.embed_dim {
            return Err(MastError::config(
                "augmentations",
                format!("{} subspaces exceed embedding dim {}", set.len(), self.model.embed_dim),
            ));
        }
        let s = &self.schedule;
        if s.epochs == 0 {
            return Err(MastError::config("schedule.epochs", "must be positive"));
        }
        if s.batch_size < 2 {
            return Err(MastError::config("schedule.batch_size", "must be at least 2"));
        }
        if !(s.base_lr >= 0.0 && s.base_lr.is_finite()) {
            return Err(MastError::config("schedule.base_lr", "must be finite and nonnegative"));
        }
        if !(0.0..1.0).contains(&s.momentum) {
            return Err(MastError::config("schedule.momentum", "must lie in [0, 1)"));
        }
        if !(s.clip_norm >= 0.0 && s.clip_norm.is_finite()) {
            return Err(MastError::config("schedule.clip_norm", "must be finite and nonnegative"));
        }
        if !(s.mask_lr_scale >= 0.0 && s.mask_lr_scale.is_finite()) {
            return Err(MastError::config("schedule.mask_lr_scale", "must be finite and nonnegative"));
        }
        if s.weight_decay < 0.0 {
            return Err(MastError::config("schedule.weight_decay", "must be nonnegative"));
        }
        if let Some(scale) = self.loss.scale {
            if !(scale > 0.0 && scale.is_finite()) {
                return Err(MastError::config("loss.scale", "must be positive"));
            }
        }
        let p = &self.probe;
        if p.epochs == 0 || p.batch_size == 0 {
            return Err(MastError::config("probe", "epochs and batch_size must be positive"));
        }
        if !(p.train_fraction > 0.0 && p.train_fraction < 1.0) {
            return Err(MastError::config("probe.train_fraction", "must lie in (0, 1)"));
        }
        Ok(())
    }

    /// Overrides one dotted key (`schedule.epochs=5`). Values parse as JSON
    /// when possible, otherwise as strings.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let mut doc = serde_json::to_value(&*self)?;
        let parsed = serde_json::from_str(value).unwrap_or_else(|_| serde_json::Value::String(value.to_string()));
        let mut slot = &mut doc;
        for part in key.split('.') {
            slot = slot
                .as_object_mut()
                .and_then(|o| o.get_mut(part))
                .ok_or_else(|| MastError::config(key, "unknown config key"))?;
        }
        *slot = parsed;
        let next: Config = serde_json::from_value(doc).map_err(|e| MastError::config(key, e.to_string()))?;
        next.validate()?;
        *self = next;
        Ok(())
    }

    /// SHA-256 of the canonical JSON encoding.
    pub fn hash(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("config serializes");
        hex::encode(Sha256::digest(bytes))
    }
}
