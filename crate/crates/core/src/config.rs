//! Run configuration shared by the command-line tools.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::denoiser::DenoiserConfig;
use crate::diffusion::{SampleConfig, ScheduleKind};
use crate::error::{Error, Result};
use crate::io::read_json;
use crate::losses::LossWeights;
use crate::optim::OptimizerConfig;
use crate::train::TrainConfig;

/// Every tunable of a run. Missing keys take their defaults; unknown keys are
/// rejected.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub model: DenoiserConfig,
    pub schedule: ScheduleKind,
    pub diffusion_steps: usize,
    pub weights: LossWeights,
    pub optimizer: OptimizerConfig,
    pub dropout: f64,
    pub guidance: f64,
    pub ddim_steps: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub fps: u32,
    pub n_frames: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        let t = TrainConfig::default();
        let s = SampleConfig::default();
        Self {
            model: DenoiserConfig::default(),
            schedule: t.schedule,
            diffusion_steps: t.diffusion_steps,
            weights: t.weights,
            optimizer: t.optimizer,
            dropout: t.dropout,
            guidance: s.guidance,
            ddim_steps: s.ddim_steps,
            epochs: t.epochs,
            batch_size: t.batch_size,
            seed: 0,
            fps: 30,
            n_frames: 150,
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate_for(self.n_frames)?;
        self.train_config().validate()?;
        if self.ddim_steps == 0 || self.ddim_steps > self.diffusion_steps {
            return Err(Error::InvalidConfig(format!(
                "ddim_steps must be in 1..={}, got {}",
                self.diffusion_steps, self.ddim_steps
            )));
        }
        if !self.guidance.is_finite() {
            return Err(Error::InvalidConfig("guidance must be finite".into()));
        }
        if self.fps == 0 {
            return Err(Error::InvalidConfig("fps must be positive".into()));
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let c: Self = serde_json::from_str(text).map_err(|e| Error::InvalidConfig(e.to_string()))?;
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let c: Self = read_json(path)?;
        c.validate()?;
        Ok(c)
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            epochs: self.epochs,
            batch_size: self.batch_size,
            dropout: self.dropout,
            diffusion_steps: self.diffusion_steps,
            schedule: self.schedule,
            weights: self.weights,
            optimizer: self.optimizer,
            seed: self.seed,
        }
    }

    pub fn sample_config(&self) -> SampleConfig {
        SampleConfig {
            guidance: self.guidance,
            ddim_steps: self.ddim_steps,
            seed: self.seed,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_are_valid_and_round_trip() {
        let c = RunConfig::default();
        c.validate().unwrap();
        let text = serde_json::to_string(&c).unwrap();
        assert_eq!(RunConfig::from_json(&text).unwrap(), c);
        assert_eq!(RunConfig::from_json("{}").unwrap(), c);
    }

    #[test]
    fn partial_and_nested_keys() {
        let c = RunConfig::from_json(r#"{"model": {"slices": 5}, "optimizer": {"lr": 0.001}, "seed": 9}"#).unwrap();
        assert_eq!(c.model.slices, 5);
        assert_eq!(c.model.hidden_dim, 128);
        assert_eq!(c.optimizer.lr, 1e-3);
        assert_eq!(c.optimizer.beta1, 0.98);
        assert_eq!(c.seed, 9);
    }

    #[test]
    fn unknown_keys_and_cross_field_errors() {
        assert!(matches!(
            RunConfig::from_json(r#"{"sedd": 1}"#),
            Err(Error::InvalidConfig(_))
        ));
        assert!(matches!(
            RunConfig::from_json(r#"{"model": {"hiden_dim": 1}}"#),
            Err(Error::InvalidConfig(_))
        ));
        assert!(matches!(
            RunConfig::from_json(r#"{"n_frames": 151}"#),
            Err(Error::NotDivisible { len: 151, parts: 6 })
        ));
        assert!(RunConfig::from_json(r#"{"ddim_steps": 2000}"#).is_err());
        assert!(RunConfig::from_json(r#"{"dropout": 1.5}"#).is_err());
        assert!(RunConfig::from_json(r#"{"schedule": "quadratic"}"#).is_err());
        assert_eq!(
            RunConfig::from_json(r#"{"schedule": "linear"}"#).unwrap().schedule,
            ScheduleKind::Linear
        );
    }
}
