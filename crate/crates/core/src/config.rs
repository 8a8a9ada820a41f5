//! Flat `key = value` training configuration.
//!
//! Every field is optional in the file; missing keys take the desk-scale
//! defaults. Unknown keys are rejected.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{HitError, Result};
use crate::model::{InitConfig, ModelConfig};
use crate::objectives::{LossWeights, ReconMode};
use crate::params::AdamConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub seed: u64,
    /// Step budget. When `epochs > 0` it is replaced by
    /// `epochs * ceil(num_shapes / batch_size)`.
    pub max_steps: u64,
    pub epochs: u64,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub queries_per_shape: usize,
    pub points_per_shape: usize,
    pub near_surface_queries: bool,
    /// Cap on interior samples used by the guidance term.
    pub guide_samples: usize,

    pub num_shapes: usize,
    pub families: Vec<String>,

    pub resolution: usize,
    pub latent_dim: usize,
    pub parts_per_level: Vec<usize>,
    pub planes: usize,
    pub sigma: f64,
    pub init_offset: f64,
    pub init_delta: f64,
    pub init_scale: f64,
    pub init_shrink: f64,
    pub init_gain: f64,
    pub init_translation_gain: f64,
    pub init_attention_gain: f64,

    pub lambda_contain: f64,
    pub lambda_cvxnet: f64,
    pub lambda_balance: f64,
    pub tau_overlap: f64,
    /// `squared` or `absolute`.
    pub recon_error: String,

    /// Write a checkpoint every this many steps (0: only at the end).
    pub checkpoint_every: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl TrainConfig {
    pub fn desk() -> Self {
        let m = ModelConfig::desk();
        let w = LossWeights::default();
        TrainConfig {
            seed: 0,
            max_steps: 2000,
            epochs: 0,
            batch_size: 4,
            learning_rate: 5e-4,
            queries_per_shape: 1024,
            points_per_shape: 1024,
            near_surface_queries: true,
            guide_samples: 512,
            num_shapes: 100,
            families: vec!["table".into(), "dumbbell".into()],
            resolution: m.resolution,
            latent_dim: m.latent_dim,
            parts_per_level: m.parts_per_level,
            planes: m.planes,
            sigma: m.sigma,
            init_offset: m.init.offset,
            init_delta: m.init.delta,
            init_scale: m.init.scale,
            init_shrink: m.init.shrink,
            init_gain: m.init.gain,
            init_translation_gain: m.init.translation_gain,
            init_attention_gain: m.init.attention_gain,
            lambda_contain: w.lambda_contain,
            lambda_cvxnet: w.lambda_cvxnet,
            lambda_balance: w.lambda_balance,
            tau_overlap: w.tau_overlap,
            recon_error: "squared".into(),
            checkpoint_every: 500,
        }
    }

    /// Published scale: batch 32, learning rate 1e-4, 2048 input points.
    pub fn published() -> Self {
        let m = ModelConfig::published();
        TrainConfig {
            batch_size: 32,
            learning_rate: 1e-4,
            points_per_shape: 2048,
            queries_per_shape: 2048,
            resolution: m.resolution,
            latent_dim: m.latent_dim,
            parts_per_level: m.parts_per_level,
            planes: m.planes,
            ..Self::desk()
        }
    }

    pub fn model(&self) -> ModelConfig {
        ModelConfig {
            resolution: self.resolution,
            latent_dim: self.latent_dim,
            parts_per_level: self.parts_per_level.clone(),
            planes: self.planes,
            sigma: self.sigma,
            init: InitConfig {
                offset: self.init_offset,
                delta: self.init_delta,
                scale: self.init_scale,
                shrink: self.init_shrink,
                gain: self.init_gain,
                translation_gain: self.init_translation_gain,
                attention_gain: self.init_attention_gain,
            },
        }
    }

    pub fn weights(&self) -> Result<LossWeights> {
        let recon_mode = match self.recon_error.as_str() {
            "squared" => ReconMode::Squared,
            "absolute" => ReconMode::Absolute,
            other => {
                return Err(HitError::Config(format!(
                    "recon_error must be `squared` or `absolute`, got `{other}`"
                )))
            }
        };
        Ok(LossWeights {
            lambda_contain: self.lambda_contain,
            lambda_cvxnet: self.lambda_cvxnet,
            lambda_balance: self.lambda_balance,
            tau_overlap: self.tau_overlap,
            recon_mode,
        })
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.learning_rate,
            ..AdamConfig::default()
        }
    }

    pub fn total_steps(&self) -> u64 {
        if self.epochs > 0 {
            let per_epoch = self.num_shapes.div_ceil(self.batch_size.max(1)) as u64;
            self.epochs * per_epoch
        } else {
            self.max_steps
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model().validate()?;
        self.weights()?.validate()?;
        let positive = [
            ("batch_size", self.batch_size),
            ("queries_per_shape", self.queries_per_shape),
            ("points_per_shape", self.points_per_shape),
            ("num_shapes", self.num_shapes),
            ("guide_samples", self.guide_samples),
        ];
        for (k, v) in positive {
            if v == 0 {
                return Err(HitError::Config(format!("{k} must be positive")));
            }
        }
        if self.queries_per_shape < 2 {
            return Err(HitError::Config("queries_per_shape must be >= 2".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(HitError::Config("learning_rate must be positive".into()));
        }
        if self.total_steps() == 0 {
            return Err(HitError::Config("max_steps (or epochs) must be positive".into()));
        }
        if self.families.is_empty() {
            return Err(HitError::Config("families must not be empty".into()));
        }
        Ok(())
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: TrainConfig =
            toml::from_str(text).map_err(|e| HitError::Config(e.message().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("flat config serializes")
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| HitError::io(path, e))?;
        toml::from_str::<TrainConfig>(&text)
            .map_err(|e| HitError::format(path, e.message()))
            .and_then(|c| c.validate().map(|_| c))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roundtrip_and_defaults() {
        let c = TrainConfig::desk();
        assert_eq!(TrainConfig::from_toml_str(&c.to_toml()).unwrap(), c);
        let partial = TrainConfig::from_toml_str("seed = 3\nparts_per_level = [2, 3]\n").unwrap();
        assert_eq!(partial.seed, 3);
        assert_eq!(partial.planes, c.planes);
    }

    #[test]
    fn rejects_unknown_and_invalid() {
        assert!(TrainConfig::from_toml_str("bogus = 1\n").is_err());
        assert!(TrainConfig::from_toml_str("batch_size = 0\n").is_err());
        assert!(TrainConfig::from_toml_str("recon_error = \"huber\"\n").is_err());
        assert!(TrainConfig::from_toml_str("planes = 3\n").is_err());
    }

    #[test]
    fn published_preset() {
        let p = TrainConfig::published();
        assert_eq!(p.parts_per_level, vec![4, 8, 16, 32]);
        assert_eq!(p.learning_rate, 1e-4);
        assert_eq!((p.batch_size, p.points_per_shape, p.planes), (32, 2048, 32));
        assert_eq!(p.epochs, 0);
        let e = TrainConfig {
            epochs: 2,
            num_shapes: 10,
            batch_size: 4,
            ..TrainConfig::desk()
        };
        assert_eq!(e.total_steps(), 6);
    }
}
