//! The single JSON document that drives `train`, `eval` and `rollout`.
//!
//! Every section is optional and falls back to the defaults below, but
//! `schema_version` must be present and unknown keys anywhere are rejected.

use std::fs;
use std::path::{Path, PathBuf};

use anticipate::datastore::ExampleConfig;
use anticipate::evalkit::GenerationConfig;
use anticipate::pte::Fusion;
use anticipate::rollout::RolloutConfig;
use anticipate::synthlab::SynthConfig;
use anticipate::tokens::SelectionConfig;
use anticipate::train::TrainConfig;
use serde::{Deserialize, Serialize};

use crate::error::{CliError, CliResult};

pub const SCHEMA_VERSION: u32 = 1;

/// Encoder hyper-parameters; input widths, vocabulary sizes and window
/// geometry are filled in from the data.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSettings {
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub ffn_mult: usize,
    pub dropout: f64,
    pub fusion: Fusion,
}

impl Default for ModelSettings {
    fn default() -> Self {
        ModelSettings {
            d_model: 64,
            n_layers: 2,
            n_heads: 4,
            ffn_mult: 4,
            dropout: 0.1,
            fusion: Fusion::Early,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RegionMode {
    /// Grounded detections from `detections.jsonl`.
    #[default]
    Detections,
    /// Uniform random boxes with empty descriptors.
    Random,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub schema_version: u32,
    /// Dataset directory; `--data` overrides it.
    pub data_dir: Option<PathBuf>,
    /// Run directory; `--out` overrides it.
    pub out_dir: Option<PathBuf>,
    /// Prompt list defining category indices; defaults to `<data_dir>/prompts.txt`.
    pub prompts: Option<PathBuf>,
    pub model: ModelSettings,
    pub window: ExampleConfig,
    pub selection: SelectionConfig,
    pub regions: RegionMode,
    pub train: TrainConfig,
    pub generation: GenerationConfig,
    pub rollout: RolloutConfig,
    pub synth: SynthConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            schema_version: SCHEMA_VERSION,
            data_dir: None,
            out_dir: None,
            prompts: None,
            model: ModelSettings::default(),
            window: ExampleConfig::default(),
            selection: SelectionConfig::default(),
            regions: RegionMode::default(),
            train: TrainConfig::default(),
            generation: GenerationConfig::default(),
            rollout: RolloutConfig::default(),
            synth: SynthConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn from_json(text: &str, origin: &Path) -> CliResult<Self> {
        let err = |message: String| CliError::Config {
            path: origin.to_path_buf(),
            message,
        };
        let value: serde_json::Value = serde_json::from_str(text).map_err(|e| err(e.to_string()))?;
        match value.get("schema_version").and_then(|v| v.as_u64()) {
            Some(v) if v == SCHEMA_VERSION as u64 => {}
            Some(v) => return Err(err(format!("unsupported schema_version {v}, expected {SCHEMA_VERSION}"))),
            None => return Err(err("missing integer `schema_version`".into())),
        }
        serde_json::from_value(value).map_err(|e| err(e.to_string()))
    }

    pub fn load(path: &Path) -> CliResult<Self> {
        if !path.exists() {
            return Err(CliError::Missing { path: path.to_path_buf() });
        }
        let text = fs::read_to_string(path).map_err(|e| CliError::Config {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?;
        Self::from_json(&text, path)
    }

    /// The config file if given, otherwise all defaults.
    pub fn load_or_default(path: Option<&Path>) -> CliResult<Self> {
        path.map_or_else(|| Ok(RunConfig::default()), RunConfig::load)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serialises")
    }
}
