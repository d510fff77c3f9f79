use std::path::{Path, PathBuf};

use anyhow::Context;
use mmfilter::fusion::{ArchConfig, ArchKind};
use mmfilter::nets::NetConfig;
use mmfilter::simenv::Task;
use mmfilter::trainer::TrainConfig;
use serde::{Deserialize, Serialize};

use crate::UsageError;

/// Everything one experiment needs, readable from a single TOML file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub task: Task,
    pub arch: ArchKind,
    /// Blackout level of the training data; filled in from the dataset.
    pub blackout: f64,
    pub train_data: Option<PathBuf>,
    /// Scored after `train` finishes when set.
    pub test_data: Option<PathBuf>,
    pub seed: u64,
    pub out: Option<PathBuf>,
    pub net: NetConfig,
    pub train: TrainConfig,
    pub sweep: SweepConfig,
}

/// Grid of architectures and blackout levels run by `sweep`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SweepConfig {
    pub archs: Vec<ArchKind>,
    pub blackouts: Vec<f64>,
    pub traj: usize,
    pub steps: usize,
    pub test_traj: usize,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            task: Task::Push,
            arch: ArchKind::CrossmodalEkf,
            blackout: 0.0,
            train_data: None,
            test_data: None,
            seed: 0,
            out: None,
            net: NetConfig::default(),
            train: TrainConfig::default(),
            sweep: SweepConfig::default(),
        }
    }
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            archs: ArchKind::ALL.to_vec(),
            blackouts: vec![0.0, 0.4, 0.8],
            traj: 300,
            steps: 120,
            test_traj: 10,
        }
    }
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| UsageError(format!("cannot read config {}: {e}", path.display())))?;
        Self::parse(&text).with_context(|| format!("in {}", path.display()))
    }

    pub fn parse(text: &str) -> anyhow::Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| UsageError(e.message().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> anyhow::Result<()> {
        self.train
            .validate()
            .map_err(|e| UsageError(e.to_string()))?;
        if !(0.0..=1.0).contains(&self.blackout)
            || self
                .sweep
                .blackouts
                .iter()
                .any(|b| !(0.0..=1.0).contains(b))
        {
            return Err(UsageError("blackout levels must lie in [0, 1]".into()).into());
        }
        Ok(())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("configuration serializes")
    }

    pub fn arch_config(&self, kind: ArchKind, state_std: Vec<f64>) -> ArchConfig {
        ArchConfig {
            net: self.net,
            state_std,
            ..ArchConfig::new(kind, self.task)
        }
    }

    /// The training configuration with the experiment seed applied.
    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            seed: self.seed,
            ..self.train.clone()
        }
    }
}
