//! The experiment configuration file (TOML).
//!
//! Every knob has a default, so an empty file is a valid configuration.
//! Unknown keys are rejected.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::altermoma::PruneConfig;
use crate::baselines::{ImpConfig, Method};
use crate::data::GenConfig;
use crate::error::{Error, Result};
use crate::model::{LossKind, TrainOptions};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    /// Backbones trained on the generated data.
    #[default]
    Standard,
    /// Camera backbone extended with an exact copy of LiDAR feature
    /// pathways that the fusion head does not read.
    Planted,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub kind: ModelKind,
    pub hidden_lidar: usize,
    pub hidden_camera: usize,
    pub hidden_fusion: usize,
    pub feat: usize,
    pub loss: LossKind,
    /// Planted models only: how many LiDAR features the camera copies.
    pub planted_copies: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            kind: ModelKind::Standard,
            hidden_lidar: 32,
            hidden_camera: 32,
            hidden_fusion: 32,
            feat: 16,
            loss: LossKind::Mse,
            planted_copies: 4,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StageConfig {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
}

impl StageConfig {
    pub fn options(&self, seed: u64) -> TrainOptions {
        TrainOptions {
            epochs: self.epochs,
            lr: self.lr,
            batch_size: self.batch_size,
            seed,
        }
    }
}

impl Default for StageConfig {
    fn default() -> Self {
        Self {
            epochs: 10,
            lr: 0.05,
            batch_size: 64,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FusionTrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    /// Also update the pretrained backbones while training the fusion head.
    pub train_backbones: bool,
}

impl Default for FusionTrainConfig {
    fn default() -> Self {
        Self {
            epochs: 10,
            lr: 0.05,
            batch_size: 64,
            train_backbones: true,
        }
    }
}

impl FusionTrainConfig {
    pub fn options(&self, seed: u64) -> TrainOptions {
        TrainOptions {
            epochs: self.epochs,
            lr: self.lr,
            batch_size: self.batch_size,
            seed,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynflowConfig {
    pub iterations: usize,
}

impl Default for SynflowConfig {
    fn default() -> Self {
        Self { iterations: 100 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblationConfig {
    /// Values of `beta / alpha`; `alpha` is held at the `[prune]` value.
    pub grid: Vec<f64>,
    pub seeds: Vec<u64>,
}

impl Default for AblationConfig {
    fn default() -> Self {
        Self {
            grid: vec![0.0, 0.25, 0.5, 1.0, 2.0, 4.0],
            seeds: vec![0, 1, 2, 3, 4],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CompareConfig {
    pub methods: Vec<Method>,
    pub rhos: Vec<f64>,
    pub seeds: Vec<u64>,
}

impl Default for CompareConfig {
    fn default() -> Self {
        Self {
            methods: Method::ALL.to_vec(),
            rhos: vec![0.8, 0.85, 0.9],
            seeds: vec![0, 1, 2, 3, 4],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VerifyConfig {
    pub seeds: Vec<u64>,
    pub fd_step: f64,
    pub fd_tolerance: f64,
    pub spearman_min: f64,
    pub prop1_lrs: Vec<f64>,
    pub prop1_batches: usize,
    pub prop1_min_monotone: usize,
}

impl Default for VerifyConfig {
    fn default() -> Self {
        Self {
            seeds: (0..10).collect(),
            fd_step: 1e-5,
            fd_tolerance: 1e-5,
            spearman_min: 0.8,
            prop1_lrs: vec![1e-2, 1e-3, 1e-4],
            prop1_batches: 4,
            prop1_min_monotone: 9,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Root seed; data, initialization, batching and pruning seeds derive
    /// from it.
    pub seed: u64,
    pub data: GenConfig,
    pub model: ModelConfig,
    pub pretrain: StageConfig,
    pub train: FusionTrainConfig,
    pub prune: PruneConfig,
    pub imp: ImpConfig,
    pub synflow: SynflowConfig,
    pub finetune: StageConfig,
    pub ablation: AblationConfig,
    pub compare: CompareConfig,
    pub verify: VerifyConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            data: GenConfig::default(),
            model: ModelConfig::default(),
            pretrain: StageConfig::default(),
            train: FusionTrainConfig::default(),
            prune: PruneConfig::default(),
            imp: ImpConfig::default(),
            synflow: SynflowConfig::default(),
            finetune: StageConfig {
                epochs: 5,
                lr: 0.02,
                batch_size: 64,
            },
            ablation: AblationConfig::default(),
            compare: CompareConfig::default(),
            verify: VerifyConfig::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("configuration serializes")
    }

    /// SHA-256 of the canonical serialization, overrides included.
    pub fn hash(&self) -> String {
        let digest = Sha256::digest(self.to_toml().as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn validate(&self) -> Result<()> {
        self.data.validate()?;
        self.prune.validate()?;
        if self.model.kind == ModelKind::Planted {
            if self.data.d_camera <= self.data.d_lidar {
                return Err(Error::Config(
                    "planted models need d_camera > d_lidar (the camera sees a LiDAR copy plus its own channels)"
                        .into(),
                ));
            }
            if self.model.planted_copies == 0 || self.model.planted_copies > self.model.feat {
                return Err(Error::Config(format!(
                    "planted_copies must be in 1..={}",
                    self.model.feat
                )));
            }
        }
        for (name, s) in [("pretrain", &self.pretrain), ("finetune", &self.finetune)] {
            if s.batch_size == 0 || !(s.lr > 0.0) {
                return Err(Error::Config(format!(
                    "[{name}] needs a positive lr and batch_size"
                )));
            }
        }
        if self.train.batch_size == 0 || !(self.train.lr > 0.0) {
            return Err(Error::Config(
                "[train] needs a positive lr and batch_size".into(),
            ));
        }
        if self.ablation.grid.iter().any(|g| !(*g >= 0.0)) {
            return Err(Error::Config("ablation grid values must be >= 0".into()));
        }
        for &rho in &self.compare.rhos {
            crate::altermoma::check_rho(rho)?;
        }
        if self.verify.fd_step <= 0.0 {
            return Err(Error::Config("verify.fd_step must be positive".into()));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_gives_defaults() {
        assert_eq!(
            ExperimentConfig::from_toml("").unwrap(),
            ExperimentConfig::default()
        );
    }

    #[test]
    fn canonical_round_trip() {
        let cfg = ExperimentConfig::default();
        let back = ExperimentConfig::from_toml(&cfg.to_toml()).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.hash(), cfg.hash());
    }

    #[test]
    fn overrides_change_hash() {
        let a = ExperimentConfig::default();
        let b = ExperimentConfig::from_toml("[prune]\nrho = 0.9\n").unwrap();
        assert_eq!(b.prune.rho, 0.9);
        assert_ne!(a.hash(), b.hash());
    }

    #[test]
    fn unknown_keys_rejected() {
        assert!(ExperimentConfig::from_toml("[prune]\nrhoo = 0.9\n").is_err());
        assert!(ExperimentConfig::from_toml("[prune]\nrho = 1.0\n").is_err());
    }
}
