//! Configuration file layout. Precedence: command-line flags, then the file,
//! then built-in defaults.

use std::path::Path;

use edgeshift::synth::SceneSpec;
use edgeshift::training::TrainConfig;
use serde::{Deserialize, Serialize};

use crate::error::CliError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GenerateConfig {
    pub scenes: usize,
    pub seed: u64,
    pub train_fraction: f64,
    pub scene: SceneSpec,
}

impl Default for GenerateConfig {
    fn default() -> Self {
        Self {
            scenes: 200,
            seed: 0,
            train_fraction: 0.8,
            scene: SceneSpec::default(),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FileConfig {
    pub generate: GenerateConfig,
    pub train: TrainConfig,
}

impl FileConfig {
    pub fn load(path: Option<&Path>) -> Result<Self, CliError> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        let text = std::fs::read_to_string(path).map_err(|e| CliError::Core(edgeshift::Error::io(path, e)))?;
        toml::from_str(&text).map_err(|e| CliError::Invalid(format!("config {}: {e}", path.display())))
    }
}

pub fn write_toml<T: Serialize>(value: &T, path: &Path) -> Result<(), CliError> {
    let text = toml::to_string_pretty(value).map_err(|e| CliError::Invalid(format!("config serialization: {e}")))?;
    std::fs::write(path, text).map_err(|e| CliError::Core(edgeshift::Error::io(path, e)))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn partial_file_keeps_defaults() {
        let cfg: FileConfig = toml::from_str("[train]\nseed = 5\n[train.weights]\ntau = 0.2\n").unwrap();
        assert_eq!(cfg.train.seed, 5);
        assert_eq!(cfg.train.weights.tau, 0.2);
        assert_eq!(cfg.train.weights.alpha_density, TrainConfig::default().weights.alpha_density);
        assert_eq!(cfg.generate, GenerateConfig::default());
    }

    #[test]
    fn round_trips_through_toml() {
        let cfg = FileConfig::default();
        let back: FileConfig = toml::from_str(&toml::to_string_pretty(&cfg).unwrap()).unwrap();
        assert_eq!(back, cfg);
    }
}
