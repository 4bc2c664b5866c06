//! Run configuration schema, readable as TOML or JSON (by extension).

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{AugmentParams, DatasetKind, SynthSpec};
use crate::eval::ProbeConfig;
use crate::nn::EncoderSpec;
use crate::train::TrainConfig;

use super::{io_err, Result, StoreError};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DatasetConfig {
    pub kind: DatasetKind,
    /// Directory holding CIFAR binary batches (ignored for synthetic data).
    pub dir: Option<PathBuf>,
    pub synth: SynthSpec,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig {
            kind: DatasetKind::Synthetic,
            dir: None,
            synth: SynthSpec::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub dataset: DatasetConfig,
    pub encoder: EncoderSpec,
    pub augment1: AugmentParams,
    pub augment2: AugmentParams,
    pub train: TrainConfig,
    pub probe: ProbeConfig,
    /// Checkpoint cadence in epochs (0 = only the final checkpoint).
    pub checkpoint_every: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            dataset: DatasetConfig::default(),
            encoder: EncoderSpec::default(),
            augment1: AugmentParams::view1(32),
            augment2: AugmentParams::view2(32),
            train: TrainConfig::default(),
            probe: ProbeConfig::default(),
            checkpoint_every: 0,
        }
    }
}

impl RunConfig {
    /// Cross-field checks beyond each component's own validation.
    pub fn validate(&self) -> Result<()> {
        self.encoder
            .validate()
            .map_err(|e| StoreError::InvalidConfig(e.to_string()))?;
        self.train
            .validate()
            .map_err(|e| StoreError::InvalidConfig(e.to_string()))?;
        for aug in [&self.augment1, &self.augment2] {
            aug.validate()
                .map_err(|e| StoreError::InvalidConfig(e.to_string()))?;
            if aug.crop_size != self.encoder.in_size {
                return Err(StoreError::InvalidConfig(format!(
                    "augment crop_size {} must match encoder in_size {}",
                    aug.crop_size, self.encoder.in_size
                )));
            }
        }
        if self.dataset.kind != DatasetKind::Synthetic && self.dataset.dir.is_none() {
            return Err(StoreError::InvalidConfig(
                "dataset.dir is required for CIFAR datasets".into(),
            ));
        }
        Ok(())
    }
}

pub fn load_config(path: &Path) -> Result<RunConfig> {
    let text = std::fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    let cfg: RunConfig = if path.extension().is_some_and(|e| e == "json") {
        serde_json::from_str(&text).map_err(|e| StoreError::InvalidConfig(e.to_string()))?
    } else {
        toml::from_str(&text).map_err(|e| StoreError::InvalidConfig(e.to_string()))?
    };
    cfg.validate()?;
    Ok(cfg)
}

pub fn save_config(path: &Path, cfg: &RunConfig) -> Result<()> {
    let text = if path.extension().is_some_and(|e| e == "json") {
        serde_json::to_string_pretty(cfg).map_err(|e| StoreError::InvalidConfig(e.to_string()))?
    } else {
        toml::to_string(cfg).map_err(|e| StoreError::InvalidConfig(e.to_string()))?
    };
    std::fs::write(path, text).map_err(|e| io_err(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn desk_config() -> RunConfig {
        let mut cfg = RunConfig::default();
        cfg.encoder.in_size = 16;
        cfg.encoder.backbone_widths = vec![8, 16];
        cfg.augment1 = AugmentParams::view1(16);
        cfg.augment2 = AugmentParams::view2(16);
        cfg.train.batch_size = 32;
        cfg.train.epochs = 4;
        cfg.train.warmup_epochs = 1;
        cfg
    }

    #[test]
    fn toml_and_json_roundtrip_identically() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = desk_config();
        for name in ["run.toml", "run.json"] {
            let path = dir.path().join(name);
            save_config(&path, &cfg).unwrap();
            let back = load_config(&path).unwrap();
            assert_eq!(cfg, back, "{name}");
            // parse -> serialize -> parse is a fixed point.
            save_config(&path, &back).unwrap();
            assert_eq!(load_config(&path).unwrap(), back);
        }
    }

    #[test]
    fn validation_catches_crop_size_mismatch_and_missing_dir() {
        let mut cfg = desk_config();
        cfg.augment1.crop_size = 8;
        assert!(matches!(cfg.validate(), Err(StoreError::InvalidConfig(_))));

        let mut cfg = desk_config();
        cfg.dataset.kind = DatasetKind::Cifar10;
        cfg.dataset.dir = None;
        assert!(matches!(cfg.validate(), Err(StoreError::InvalidConfig(_))));
    }

    #[test]
    fn partial_toml_uses_defaults() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("partial.toml");
        std::fs::write(&path, "[train]\nseed = 9\nepochs = 20\n").unwrap();
        let cfg = load_config(&path).unwrap();
        assert_eq!(cfg.train.seed, 9);
        assert_eq!(cfg.train.epochs, 20);
        assert_eq!(cfg.train.lr, 0.3, "unset fields fall back to defaults");
    }
}
