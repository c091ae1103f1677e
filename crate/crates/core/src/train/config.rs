use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use super::adam::LrSchedule;
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::objectives::IOU_THRESHOLD;

/// Training run settings. Parsed from JSON; unknown keys are rejected.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub preset: String,
    pub seed: u64,
    pub batch_size: usize,
    pub phase1_steps: u64,
    pub phase2_steps: u64,
    pub phase3_steps: u64,
    /// Largest view count drawn for multi-view batches.
    pub views_max: usize,
    pub threshold: f32,
    pub lr: f64,
    pub lr_decay_epoch: u64,
    pub lr_decay_factor: f64,
    /// Validation interval in steps; 0 disables validation and early stopping.
    pub eval_every: u64,
    pub patience: u32,
    pub min_delta: f64,
    pub data: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub metrics: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        let lr = LrSchedule::default();
        RunConfig {
            preset: "desk".into(),
            seed: 0,
            batch_size: 4,
            phase1_steps: 2000,
            phase2_steps: 600,
            phase3_steps: 600,
            views_max: 4,
            threshold: IOU_THRESHOLD,
            lr: lr.base,
            lr_decay_epoch: lr.decay_epoch,
            lr_decay_factor: lr.factor,
            eval_every: 50,
            patience: 10,
            min_delta: 1e-4,
            data: None,
            out: None,
            metrics: None,
        }
    }
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: RunConfig = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn model(&self) -> Result<ModelConfig> {
        ModelConfig::preset(&self.preset)
    }

    pub fn schedule(&self) -> LrSchedule {
        LrSchedule { base: self.lr, decay_epoch: self.lr_decay_epoch, factor: self.lr_decay_factor }
    }

    pub fn validate(&self) -> Result<()> {
        self.model()?;
        let bad = |m: &str| Err(Error::Config(m.into()));
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1");
        }
        if self.views_max < 2 {
            return bad("views_max must be at least 2");
        }
        if !(self.threshold > 0.0 && self.threshold < 1.0) {
            return bad("threshold must lie in (0, 1)");
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return bad("lr must be finite and non-negative");
        }
        if !(self.lr_decay_factor > 0.0 && self.lr_decay_factor.is_finite()) {
            return bad("lr_decay_factor must be positive");
        }
        if self.eval_every > 0 && self.patience == 0 {
            return bad("patience must be at least 1");
        }
        if !(self.min_delta >= 0.0) {
            return bad("min_delta must be non-negative");
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate_and_round_trip() {
        let c = RunConfig::default();
        c.validate().unwrap();
        assert_eq!(c.batch_size, 4);
        let text = serde_json::to_string(&c).unwrap();
        assert_eq!(RunConfig::from_json(&text).unwrap(), c);
    }

    #[test]
    fn unknown_keys_rejected() {
        let err = RunConfig::from_json(r#"{"seed": 3, "learning_rate": 0.1}"#).unwrap_err();
        assert!(err.to_string().contains("learning_rate"), "{err}");
        assert_eq!(RunConfig::from_json(r#"{"seed": 3}"#).unwrap().seed, 3);
        assert!(RunConfig::from_json(r#"{"preset": "tiny"}"#).is_err());
        assert!(RunConfig::from_json(r#"{"threshold": 1.5}"#).is_err());
    }
}
