//! Training recipe: tri-stage schedule, Adam, seeded batching, checkpoints.

mod adam;
mod checkpoint;
mod data;
mod schedule;
mod trainer;

use std::path::Path;

use serde::{Deserialize, Serialize};

pub use adam::{clip_grad_norm, Adam};
pub use checkpoint::{Checkpoint, CheckpointMeta, HistoryEntry};
pub use data::{load_clip, ClipData, Dataset};
pub use schedule::lr_at;
pub use trainer::{evaluate_model, predict_clip, train, EpochRecord, RunRecord, TrainOutput, METRICS_HEADER};

use crate::error::{io_err, Result, SeldError};
use crate::features::FeatureConfig;
use crate::metrics::MetricsConfig;
use crate::model::ModelConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr_peak: f64,
    pub ramp_frac: f64,
    pub hold_frac: f64,
    pub decay_frac: f64,
    /// Final learning rate as a fraction of the peak.
    pub final_lr_ratio: f64,
    pub seed: u64,
    pub eval_every: usize,
    /// Global gradient-norm clip; `0` disables clipping.
    pub clip_grad_norm: f64,
    /// Fraction of clips held out for evaluation; `0` evaluates on the training clips.
    pub val_fraction: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 500,
            batch_size: 32,
            lr_peak: 1e-3,
            ramp_frac: 0.05,
            hold_frac: 0.45,
            decay_frac: 0.5,
            final_lr_ratio: 0.01,
            seed: 0,
            eval_every: 1,
            clip_grad_norm: 5.0,
            val_fraction: 0.2,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let sum = self.ramp_frac + self.hold_frac + self.decay_frac;
        if (sum - 1.0).abs() > 1e-9 || [self.ramp_frac, self.hold_frac, self.decay_frac].iter().any(|f| *f < 0.0) {
            return Err(SeldError::Config(format!(
                "schedule fractions ({}, {}, {}) must be non-negative and sum to 1",
                self.ramp_frac, self.hold_frac, self.decay_frac
            )));
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(SeldError::Config("epochs and batch_size must be positive".into()));
        }
        if !(self.lr_peak > 0.0) || !(0.0..=1.0).contains(&self.final_lr_ratio) {
            return Err(SeldError::Config(format!("lr_peak {} / final_lr_ratio {}", self.lr_peak, self.final_lr_ratio)));
        }
        if !(0.0..1.0).contains(&self.val_fraction) {
            return Err(SeldError::Config(format!("val_fraction {} outside [0, 1)", self.val_fraction)));
        }
        Ok(())
    }
}

/// Contents of a run configuration file (TOML).
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub features: FeatureConfig,
    pub metrics: MetricsConfig,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| SeldError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(io_err(path))?;
        Self::from_toml(&text).map_err(|e| match e {
            SeldError::Config(m) => SeldError::Config(format!("{}: {m}", path.display())),
            e => e,
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        if self.model.n_classes != self.metrics.num_classes {
            return Err(SeldError::Config(format!(
                "model has {} classes but metrics expect {}",
                self.model.n_classes, self.metrics.num_classes
            )));
        }
        if self.model.n_mels != self.features.n_mels {
            return Err(SeldError::Config(format!(
                "model expects {} mel bands but features produce {}",
                self.model.n_mels, self.features.n_mels
            )));
        }
        Ok(())
    }
}
