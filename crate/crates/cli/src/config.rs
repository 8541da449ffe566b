//! Run configuration files (TOML).

use std::path::{Path, PathBuf};

use breg_core::data::{load_fer2013_csv, load_manifest, synth_generate, Dataset, Split, SynthSpec};
use breg_core::model::{Head, NetworkConfig};
use breg_core::training::TrainConfig;
use serde::{Deserialize, Serialize};

use crate::CliError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub network: NetworkConfig,
    pub training: TrainConfig,
    pub data: DataConfig,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DataSource {
    Synthetic,
    Fer2013,
    Manifest,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    pub source: DataSource,
    /// FER2013 CSV or manifest CSV; overridden by `--data`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub path: Option<PathBuf>,
    /// Per-channel standardization of every split with its own statistics.
    #[serde(default)]
    pub standardize: bool,
    /// Generator settings when `source = "synthetic"`. The validation and
    /// test splits use `seed + 1` and `seed + 2`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub synthetic: Option<SynthSpec>,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self, CliError> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| CliError::Usage(format!("config: {e}")))?;
        cfg.network.validate()?;
        if cfg.data.source == DataSource::Synthetic && cfg.data.synthetic.is_none() {
            return Err(CliError::Usage(
                "config: data.source = \"synthetic\" needs a [data.synthetic] table".into(),
            ));
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Io(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    /// The configuration with every default filled in.
    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("run config serializes")
    }
}

/// Loaded splits; absent ones are `None`.
#[derive(Debug, Default)]
pub struct Splits {
    pub train: Option<Dataset>,
    pub val: Option<Dataset>,
    pub test: Option<Dataset>,
}

impl Splits {
    pub fn take(&mut self, split: Split) -> Option<Dataset> {
        match split {
            Split::Train => self.train.take(),
            Split::Val => self.val.take(),
            Split::Test => self.test.take(),
        }
    }
}

impl DataConfig {
    /// Loads all splits. `head` decides the class count passed to manifest
    /// loading.
    pub fn load(&self, head: Head) -> Result<Splits, CliError> {
        let path = || {
            self.path
                .clone()
                .ok_or_else(|| CliError::Usage(format!("data source {:?} needs a path (data.path or --data)", self.source)))
        };
        let mut splits = match self.source {
            DataSource::Synthetic => {
                let spec = self.synthetic.as_ref().expect("checked when the config was loaded");
                let with_seed = |offset: u64| SynthSpec {
                    seed: spec.seed.wrapping_add(offset),
                    ..spec.clone()
                };
                Splits {
                    train: Some(synth_generate(spec, Split::Train)?),
                    val: Some(synth_generate(&with_seed(1), Split::Val)?),
                    test: Some(synth_generate(&with_seed(2), Split::Test)?),
                }
            }
            DataSource::Fer2013 => {
                let fer = load_fer2013_csv(&path()?)?;
                let nonempty = |d: Dataset| (!d.is_empty()).then_some(d);
                Splits {
                    train: nonempty(fer.train),
                    val: nonempty(fer.val),
                    test: nonempty(fer.test),
                }
            }
            DataSource::Manifest => {
                let classes = match head {
                    Head::Classification { classes } => Some(classes),
                    Head::Regression => None,
                };
                let mut splits = Splits::default();
                for d in load_manifest(&path()?, classes)? {
                    match d.split {
                        Split::Train => splits.train = Some(d),
                        Split::Val => splits.val = Some(d),
                        Split::Test => splits.test = Some(d),
                    }
                }
                splits
            }
        };
        if self.standardize {
            for d in [&mut splits.train, &mut splits.val, &mut splits.test].into_iter().flatten() {
                d.standardize();
            }
        }
        Ok(splits)
    }
}
