use std::path::Path;

use serde::{Deserialize, Serialize};
use soyscan::augment::EffectRanges;
use soyscan::camera::{CameraIntrinsics, UndistortConfig};
use soyscan::counting::DEFAULT_BLOB_THRESHOLD;
use soyscan::ranking::DEFAULT_THRESHOLDS;
use soyscan::spatial::GridMask;
use soyscan::synthfield::DatasetSpec;
use soyscan::tensornet::AdamConfig;
use soyscan::yieldnet::TrainConfig;

use crate::error::CliError;

/// Run configuration. Every section is optional; missing values take the
/// defaults below and command-line flags override the file.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub seed: u64,
    /// Worker threads; 0 lets the runtime decide.
    pub threads: usize,
    pub camera: CameraIntrinsics,
    pub undistort: UndistortConfig,
    pub augment: EffectRanges,
    pub count: CountConfig,
    #[serde(rename = "yield")]
    pub yield_model: YieldConfig,
    pub spatial: SpatialConfig,
    pub rank: RankConfig,
    pub synth: DatasetSpec,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CountConfig {
    /// Luma threshold of the blob counter.
    pub threshold: f32,
    pub min_area: usize,
    /// Minimum confidence for detector points.
    pub confidence: f64,
}

impl Default for CountConfig {
    fn default() -> Self {
        CountConfig {
            threshold: DEFAULT_BLOB_THRESHOLD,
            min_area: 1,
            confidence: 0.5,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    F32,
    #[default]
    F64,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct YieldConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub feature_channels: usize,
    /// Identifies the frozen reference backbone.
    pub extractor_seed: u64,
    pub precision: Precision,
}

impl Default for YieldConfig {
    fn default() -> Self {
        let adam = AdamConfig::default();
        YieldConfig {
            epochs: 50,
            batch_size: 8,
            lr: adam.lr,
            beta1: adam.beta1,
            beta2: adam.beta2,
            eps: adam.eps,
            feature_channels: 32,
            extractor_seed: 0,
            precision: Precision::F64,
        }
    }
}

impl YieldConfig {
    pub fn train_config(&self, seed: u64) -> TrainConfig {
        TrainConfig {
            epochs: self.epochs,
            batch_size: self.batch_size,
            adam: AdamConfig {
                lr: self.lr,
                beta1: self.beta1,
                beta2: self.beta2,
                eps: self.eps,
            },
            seed,
        }
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SpatialConfig {
    pub half_range: i64,
    pub half_pass: i64,
    pub drop_corners: bool,
}

impl Default for SpatialConfig {
    fn default() -> Self {
        SpatialConfig {
            half_range: 2,
            half_pass: 2,
            drop_corners: true,
        }
    }
}

impl SpatialConfig {
    pub fn mask(&self) -> GridMask {
        GridMask::window(self.half_range, self.half_pass, self.drop_corners)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RankConfig {
    pub thresholds: Vec<f64>,
    /// Rank raw values instead of spatially adjusted ones.
    pub raw: bool,
}

impl Default for RankConfig {
    fn default() -> Self {
        RankConfig {
            thresholds: DEFAULT_THRESHOLDS.to_vec(),
            raw: false,
        }
    }
}

impl Config {
    pub fn load(path: Option<&Path>) -> Result<Self, CliError> {
        let Some(path) = path else {
            return Ok(Config::default());
        };
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::config(format!("cannot read {}: {e}", path.display())))?;
        let cfg: Config = toml::from_str(&text)
            .map_err(|e| CliError::config(format!("{}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), CliError> {
        self.camera
            .validate()
            .map_err(|e| CliError::config(e.to_string()))?;
        self.augment
            .validate()
            .map_err(|e| CliError::config(e.to_string()))?;
        let y = &self.yield_model;
        if y.epochs == 0 || y.batch_size == 0 || y.feature_channels == 0 || !(y.lr > 0.0) {
            return Err(CliError::config(
                "yield: epochs, batch_size, feature_channels and lr must be positive",
            ));
        }
        if self
            .rank
            .thresholds
            .iter()
            .any(|t| !(*t > 0.0 && *t <= 1.0))
        {
            return Err(CliError::config("rank: thresholds must lie in (0, 1]"));
        }
        if self.spatial.half_range < 0 || self.spatial.half_pass < 0 {
            return Err(CliError::config(
                "spatial: window half-widths must be non-negative",
            ));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_follow_the_field_setup() {
        let c = Config::default();
        assert_eq!(c.camera.fx, 410.0);
        assert_eq!(c.undistort.crop, (1000, 1000));
        assert_eq!(c.yield_model.batch_size, 8);
        assert_eq!(c.yield_model.epochs, 50);
        assert_eq!(c.rank.thresholds, vec![0.1, 0.2, 0.3]);
    }

    #[test]
    fn partial_file_keeps_defaults() {
        let c: Config =
            toml::from_str("seed = 3\n[yield]\nepochs = 2\n[camera]\nfx = 300.0\n").unwrap();
        assert_eq!(c.seed, 3);
        assert_eq!(c.yield_model.epochs, 2);
        assert_eq!(c.yield_model.batch_size, 8);
        assert_eq!(c.camera.fx, 300.0);
        assert_eq!(c.camera.py, 526.0);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(toml::from_str::<Config>("[yield]\nepoch = 2\n").is_err());
    }
}
