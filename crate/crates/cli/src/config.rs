//! Run configuration: a TOML file whose every field has a default, overridden
//! by command-line flags.

use std::fs;
use std::path::{Path, PathBuf};

use mscnn::metrics::{PositiveSet, DEFAULT_TAU};
use mscnn::train::{EvalOptions, TrainConfig};
use mscnn::NetworkConfig;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    #[default]
    F32,
    F64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Run seed; every random stream derives from it. Overrides `train.seed`.
    pub seed: u64,
    /// Worker threads for segmentation; 0 uses every core.
    pub threads: usize,
    pub precision: Precision,
    /// Dataset directory.
    pub data: Option<PathBuf>,
    /// Output directory.
    pub out: Option<PathBuf>,
    /// Segmentation stride.
    pub stride: usize,
    /// Windows per inference batch.
    pub batch: usize,
    /// Confidence threshold for slice classification.
    pub tau: f64,
    pub positive_set: PositiveSet,
    pub network: NetworkConfig,
    pub train: TrainConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            threads: 0,
            precision: Precision::F32,
            data: None,
            out: None,
            stride: 1,
            batch: 256,
            tau: DEFAULT_TAU,
            positive_set: PositiveSet::LabelMatched,
            network: NetworkConfig::default(),
            train: TrainConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, String> {
        let text = fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
        toml::from_str(&text).map_err(|e| format!("{}: {e}", path.display()))
    }

    pub fn eval_options(&self) -> EvalOptions {
        EvalOptions {
            stride: self.stride,
            batch: self.batch,
            tau: self.tau,
            positive_set: self.positive_set,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_gives_defaults() {
        let c: RunConfig = toml::from_str("").unwrap();
        assert_eq!(c, RunConfig::default());
        assert_eq!(c.train.epochs, 80);
        assert_eq!(c.network.fc_in, 8192);
    }

    #[test]
    fn unknown_keys_rejected() {
        assert!(toml::from_str::<RunConfig>("sed = 3").is_err());
        assert!(toml::from_str::<RunConfig>("[train]\nlearning_rate = 0.1").is_err());
        let c: RunConfig = toml::from_str("seed = 9\n[network]\nwidth_scale = 0.5").unwrap();
        assert_eq!((c.seed, c.network.width_scale), (9, 0.5));
    }
}
