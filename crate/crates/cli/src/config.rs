use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use smagnet::data::GenParams;
use smagnet::eval::MissingPattern;
use smagnet::model::ModelConfig;
use smagnet::train::TrainConfig;

use crate::error::{CliError, Result};

/// Complete description of one experiment run.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub data: DataConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
}

/// Where the dataset comes from: a generated directory, or in-memory
/// generation from `generator` when `dir` is unset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub dir: Option<PathBuf>,
    pub scenes: usize,
    pub generator: GenParams,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            dir: None,
            scenes: 384,
            generator: GenParams::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub batch_size: usize,
    /// Missingness levels in percent.
    pub ratios: Vec<u32>,
    pub pattern: MissingPattern,
    /// Injection seeds per ratio.
    pub sweep_seeds: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            batch_size: 8,
            ratios: vec![0, 25, 50, 75, 100],
            pattern: MissingPattern::Band,
            sweep_seeds: 3,
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::config(format!("{}: {e}", path.display())))?;
        let cfg: Self = serde_json::from_str(&text)
            .map_err(|e| CliError::config(format!("{}: {e}", path.display())))?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        self.data.generator.validate()?;
        if self.eval.batch_size == 0 {
            return Err(CliError::config("eval.batch_size must be positive"));
        }
        if self.eval.sweep_seeds == 0 {
            return Err(CliError::config("eval.sweep_seeds must be positive"));
        }
        Ok(())
    }
}
