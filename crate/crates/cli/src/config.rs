//! Run configuration files (TOML, or JSON by extension).

use std::path::Path;

use anyhow::Context;
use serde::{Deserialize, Serialize};
use specseg::cmodel::{Mode, ModelConfig};
use specseg::lad::LadConfig;
use specseg::pipeline::TrainConfig;
use specseg::siggen::GeneratorConfig;
use specseg::Precision;

use crate::CliError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelSize {
    Full,
    Miniature,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    pub size: ModelSize,
    pub seed: u64,
    pub precision: Precision,
}

impl Default for ModelSection {
    fn default() -> Self {
        Self { size: ModelSize::Full, seed: 0, precision: Precision::Single }
    }
}

impl ModelSection {
    pub fn build(&self, input_bins: usize, mode: Mode) -> ModelConfig {
        let cfg = match self.size {
            ModelSize::Full => ModelConfig::new(input_bins, mode),
            ModelSize::Miniature => ModelConfig::miniature(input_bins, mode),
        };
        cfg.with_seed(self.seed)
    }
}

/// Every section is optional and falls back to the defaults.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub data: GeneratorConfig,
    pub model: ModelSection,
    pub train: TrainConfig,
    pub lad: LadConfig,
}

impl RunConfig {
    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        let is_json = path.extension().is_some_and(|e| e.eq_ignore_ascii_case("json"));
        let parsed = if is_json {
            serde_json::from_str(&text).map_err(|e| e.to_string())
        } else {
            toml::from_str(&text).map_err(|e| e.to_string())
        };
        parsed.map_err(|msg| CliError::Config(format!("{}: {msg}", path.display())).into())
    }

    pub fn load_or_default(path: Option<&Path>) -> anyhow::Result<Self> {
        path.map_or_else(|| Ok(Self::default()), Self::load)
    }

    pub fn override_seed(&mut self, seed: Option<u64>) {
        if let Some(s) = seed {
            self.data.seed = s;
            self.model.seed = s;
            self.train.seed = s;
        }
    }

    pub fn validate(&self) -> specseg::Result<()> {
        self.data.validate()?;
        self.train.validate()?;
        self.lad.validate()
    }
}
