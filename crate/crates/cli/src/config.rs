//! Experiment configuration files.
//!
//! TOML with four sections, every key optional and every unknown key an
//! error:
//!
//! ```toml
//! [model]   # KfsConfig fields
//! [train]   # TrainConfig fields
//! [data]    # csv = "path" or a [data.synthetic] table, split = "ett" | "standard"
//! [run]     # out_dir = "runs/x"
//! ```
//!
//! A relative `data.csv` is resolved against the config file's directory.

use std::fs;
use std::path::{Path, PathBuf};

use kfs_core::data::{load_csv, split_and_scale, synth_series, RawSeries, SplitRatio, SynthSpec, WindowedDataset};
use kfs_core::model::KfsConfig;
use kfs_core::train::TrainConfig;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{CliError, CliResult};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitChoice {
    /// 6:2:2
    #[default]
    Ett,
    /// 7:1:2
    Standard,
}

impl SplitChoice {
    pub fn ratio(self) -> SplitRatio {
        match self {
            SplitChoice::Ett => SplitRatio::ETT,
            SplitChoice::Standard => SplitRatio::STANDARD,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub csv: Option<PathBuf>,
    pub synthetic: Option<SynthSpec>,
    pub split: SplitChoice,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub out_dir: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            out_dir: PathBuf::from("runs/default"),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub model: KfsConfig,
    pub train: TrainConfig,
    pub data: DataConfig,
    pub run: RunConfig,
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> CliResult<Self> {
        toml::from_str(text).map_err(|e| CliError::Config(e.to_string()))
    }

    pub fn to_toml(&self) -> CliResult<String> {
        toml::to_string(self).map_err(|e| CliError::Config(e.to_string()))
    }

    /// Reads a config file and anchors a relative CSV path at its directory.
    pub fn load(path: &Path) -> CliResult<Self> {
        let text = fs::read_to_string(path).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        let mut cfg = Self::from_toml(&text).map_err(|e| match e {
            CliError::Config(m) => CliError::Config(format!("{}: {m}", path.display())),
            other => other,
        })?;
        if let Some(csv) = cfg.data.csv.as_mut() {
            if csv.is_relative() {
                if let Some(dir) = path.parent() {
                    *csv = dir.join(&*csv);
                }
            }
        }
        Ok(cfg)
    }

    /// Applies the command-line seed to both initialization and shuffling.
    pub fn with_seed(mut self, seed: Option<u64>) -> Self {
        if let Some(s) = seed {
            self.train.seed = s;
        }
        self
    }

    /// SHA-256 of the canonical JSON encoding of the model, train and data
    /// sections, hex. The output directory does not contribute.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(&(&self.model, &self.train, &self.data)).expect("config serializes");
        hex::encode(Sha256::digest(json))
    }

    pub fn validate(&self) -> CliResult<()> {
        self.model.validate()?;
        self.train.validate(self.model.horizon)?;
        match (&self.data.csv, &self.data.synthetic) {
            (Some(_), Some(_)) => Err(CliError::Config("set only one of data.csv and data.synthetic".into())),
            (None, None) => Err(CliError::Config("no dataset: set data.csv or data.synthetic".into())),
            _ => Ok(()),
        }
    }

    /// Loads the configured series without checking its channel count.
    pub fn load_raw(&self) -> CliResult<RawSeries> {
        match (&self.data.csv, &self.data.synthetic) {
            (Some(path), None) => {
                if !path.exists() {
                    return Err(CliError::Data(format!("dataset {} does not exist", path.display())));
                }
                Ok(load_csv(path)?)
            }
            (None, Some(spec)) => Ok(synth_series(spec)?),
            _ => Err(CliError::Config("set exactly one of data.csv and data.synthetic".into())),
        }
    }

    /// Loads the configured series and checks it against `model.channels`.
    pub fn load_series(&self) -> CliResult<RawSeries> {
        let raw = self.load_raw()?;
        if raw.channels() != self.model.channels {
            return Err(CliError::Config(format!(
                "model.channels = {} but the dataset has {} channels",
                self.model.channels,
                raw.channels()
            )));
        }
        Ok(raw)
    }

    pub fn dataset_for(&self, raw: &RawSeries, lookback: usize, horizon: usize) -> CliResult<WindowedDataset> {
        Ok(split_and_scale(raw, self.data.split.ratio(), lookback, horizon)?)
    }
}
