//! Run configuration read from a JSON file.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use wbal_core::data::{AnalysisSpec, ParseOptions};
use wbal_core::example::{DEFAULT_PER_GROUP, DEFAULT_SEED};
use wbal_core::overlap::TrimRule;
use wbal_core::pipeline::{all_algorithms, AlgorithmChoice};
use wbal_core::sensitivity::{GridSpec, SensitivityConfig};
use wbal_core::weights::{Algorithm, EngineConfig};

use crate::CliError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExampleSource {
    #[serde(default = "default_seed")]
    pub seed: u64,
    #[serde(default = "default_per_group")]
    pub n_per_group: usize,
}

fn default_seed() -> u64 {
    DEFAULT_SEED
}

fn default_per_group() -> usize {
    DEFAULT_PER_GROUP
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SensitivitySettings {
    pub enabled: bool,
    pub grid: GridSpec,
    pub draws: usize,
    pub seed: u64,
}

impl Default for SensitivitySettings {
    fn default() -> Self {
        let d = SensitivityConfig::default();
        Self {
            enabled: false,
            grid: d.grid,
            draws: d.draws,
            seed: d.seed,
        }
    }
}

impl SensitivitySettings {
    pub fn config(&self) -> Option<SensitivityConfig> {
        self.enabled.then(|| SensitivityConfig {
            grid: self.grid.clone(),
            draws: self.draws,
            seed: self.seed,
        })
    }
}

/// Exactly one of `input_path` and `example` selects the data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub input_path: Option<PathBuf>,
    #[serde(default)]
    pub example: Option<ExampleSource>,
    #[serde(default)]
    pub parse: ParseOptions,
    pub spec: AnalysisSpec,
    #[serde(default)]
    pub trims: Vec<TrimRule>,
    #[serde(default = "all_algorithms")]
    pub algorithms: Vec<Algorithm>,
    #[serde(default)]
    pub engine: EngineConfig,
    #[serde(default)]
    pub choice: AlgorithmChoice,
    #[serde(default)]
    pub sensitivity: SensitivitySettings,
    #[serde(default)]
    pub output: Option<PathBuf>,
    #[serde(default)]
    pub title: Option<String>,
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self, CliError> {
        let de = &mut serde_json::Deserializer::from_str(text);
        serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            let inner = e.into_inner();
            let msg = if path == "." { inner.to_string() } else { format!("{path}: {inner}") };
            CliError::Config(vec![msg])
        })
    }

    /// Reads `path`; a relative `input_path` is taken relative to the
    /// config file's directory.
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(vec![format!("{}: {e}", path.display())]))?;
        let mut cfg = Self::from_json(&text)?;
        if let Some(input) = &cfg.input_path {
            if input.is_relative() {
                if let Some(dir) = path.parent() {
                    cfg.input_path = Some(dir.join(input));
                }
            }
        }
        Ok(cfg)
    }

    /// Checks everything that does not need the data. Every problem is
    /// reported with the config path that caused it.
    pub fn validate(&self) -> Result<(), CliError> {
        let mut errors = Vec::new();
        match (&self.input_path, &self.example) {
            (Some(_), Some(_)) => errors.push("input_path: give either input_path or example, not both".to_string()),
            (None, None) => errors.push("input_path: no data source; set input_path or example".to_string()),
            _ => {}
        }
        if self.algorithms.is_empty() {
            errors.push("algorithms: at least one algorithm is required".into());
        }
        if let AlgorithmChoice::Fixed(a) = self.choice {
            if !self.algorithms.contains(&a) {
                errors.push(format!("choice: {a} is not among the selected algorithms"));
            }
        }
        for (i, rule) in self.trims.iter().enumerate() {
            if let Err(e) = rule.validate() {
                errors.push(format!("trims[{i}]: {e}"));
            }
        }
        if let Err(e) = self.engine.gbm.validate() {
            errors.push(format!("engine.gbm: {e}"));
        }
        if self.sensitivity.enabled {
            if let Err(e) = self.sensitivity.grid.validate() {
                errors.push(format!("sensitivity.grid: {e}"));
            }
            if self.sensitivity.draws == 0 {
                errors.push("sensitivity.draws: must be at least 1".into());
            }
        }
        if errors.is_empty() {
            Ok(())
        } else {
            Err(CliError::Config(errors))
        }
    }
}
