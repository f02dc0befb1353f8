//! The run configuration file: one TOML document with a section per stage.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{DEFAULT_SEQUENCE_CAP, DatasetManifest, PreparedData, UserDomainEvents, ingest_events, prepare};
use crate::error::{Result, UumError};
use crate::evaluation::EvalConfig;
use crate::model::ModelConfig;
use crate::synthgen::GeneratorConfig;
use crate::training::TrainConfig;

/// Sequence preparation shared by training, evaluation and export.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub sequence_cap: usize,
    /// Events per window: `window_len − 1` context events and one label.
    pub window_len: usize,
    /// Distance between window starts. Equal to `window_len` for a partition.
    pub stride: usize,
    /// Fraction of malformed event records tolerated during ingestion.
    pub max_error_rate: f64,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self { sequence_cap: DEFAULT_SEQUENCE_CAP, window_len: 8, stride: 8, max_error_rate: 0.0 }
    }
}

impl DataConfig {
    pub fn validate(&self) -> Result<()> {
        if self.window_len < 2 {
            return Err(UumError::Config("data.window_len must be at least 2".into()));
        }
        if self.stride == 0 {
            return Err(UumError::Config("data.stride must be at least 1".into()));
        }
        if self.sequence_cap < self.window_len {
            return Err(UumError::Config(format!(
                "data.sequence_cap {} is shorter than data.window_len {}",
                self.sequence_cap, self.window_len
            )));
        }
        if !(0.0..=1.0).contains(&self.max_error_rate) {
            return Err(UumError::Config("data.max_error_rate must lie in [0, 1]".into()));
        }
        Ok(())
    }

    pub fn prepare(&self, users: &UserDomainEvents) -> PreparedData {
        prepare(users, self.sequence_cap, self.window_len, self.stride)
    }
}

/// Seeds and parallelism for the variant comparison.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CompareConfig {
    pub seeds: usize,
    /// Train the variant × seed grid concurrently. Results do not change.
    pub parallel: bool,
}

impl Default for CompareConfig {
    fn default() -> Self {
        Self { seeds: 3, parallel: false }
    }
}

/// File locations. Unset inputs default to the files `generate` writes into
/// `out_dir`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PathsConfig {
    pub out_dir: PathBuf,
    pub events: Option<PathBuf>,
    pub manifest: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
}

impl Default for PathsConfig {
    fn default() -> Self {
        Self { out_dir: PathBuf::from("out"), events: None, manifest: None, checkpoint: None }
    }
}

impl PathsConfig {
    pub fn events(&self) -> PathBuf {
        self.events.clone().unwrap_or_else(|| self.out_dir.join("events.jsonl"))
    }

    pub fn manifest(&self) -> PathBuf {
        self.manifest.clone().unwrap_or_else(|| self.out_dir.join("manifest.json"))
    }

    pub fn checkpoint(&self) -> PathBuf {
        self.checkpoint.clone().unwrap_or_else(|| self.out_dir.join("model.ckpt"))
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub generator: GeneratorConfig,
    pub data: DataConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
    pub compare: CompareConfig,
    pub paths: PathsConfig,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| UumError::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| UumError::Config(format!("{}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run config serializes to TOML")
    }

    /// Single-line JSON form embedded in output artifacts.
    pub fn echo(&self) -> String {
        serde_json::to_string(self).expect("run config serializes to JSON")
    }

    /// Replaces every seed: generator, initialization, shuffling and negatives.
    pub fn set_seed(&mut self, seed: u64) {
        self.generator.seed = seed;
        self.model.init_seed = seed;
        self.train.seed = seed;
        self.eval.seed = seed;
    }

    /// Checks every section that does not depend on the data.
    pub fn validate(&self) -> Result<()> {
        self.generator.validate()?;
        self.data.validate()?;
        self.train.validate()?;
        self.eval.validate()?;
        if self.compare.seeds == 0 {
            return Err(UumError::Config("compare.seeds must be at least 1".into()));
        }
        if self.model.positional_capacity < self.data.window_len - 1 {
            return Err(UumError::Config(format!(
                "model.positional_capacity {} cannot hold the {} context events of a window",
                self.model.positional_capacity,
                self.data.window_len - 1
            )));
        }
        Ok(())
    }

    /// Loads the manifest and ingests the event log named by `paths`.
    pub fn load_data(&self) -> Result<(DatasetManifest, UserDomainEvents)> {
        let manifest = DatasetManifest::load(&self.paths.manifest())?;
        let outcome = ingest_events(&self.paths.events(), &manifest, self.data.max_error_rate)?;
        Ok((manifest, outcome.users))
    }
}
