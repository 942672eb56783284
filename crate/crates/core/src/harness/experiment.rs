use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{DatasetKind, PhantomConfig, Window};
use crate::error::{Error, Result};
use crate::losses::LossConfig;
use crate::model::NetworkConfig;

use super::optim::AdamConfig;

/// Where training volumes come from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum DatasetSource {
    Phantom {
        #[serde(default)]
        config: PhantomConfig,
        #[serde(default)]
        seed: u64,
    },
    Manifest {
        path: PathBuf,
    },
}

impl DatasetSource {
    pub fn kind(&self) -> Option<DatasetKind> {
        match self {
            DatasetSource::Phantom { .. } => Some(DatasetKind::Phantom),
            DatasetSource::Manifest { .. } => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSpec {
    pub source: DatasetSource,
    pub window: Window,
    /// Cross-validation folds over the training volumes. With one fold there
    /// is no validation set and every training volume is fitted.
    pub folds: usize,
    pub fold: usize,
}

impl Default for DataSpec {
    fn default() -> Self {
        DataSpec {
            source: DatasetSource::Phantom {
                config: PhantomConfig { organs: 4, ..PhantomConfig::default() },
                seed: 0,
            },
            window: Window::default(),
            folds: 5,
            fold: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentSpec {
    pub loss: LossConfig,
    pub network: NetworkConfig,
    pub data: DataSpec,
    pub optimizer: AdamConfig,
    pub batch_size: usize,
    pub epochs: usize,
    /// Seeds parameter init, the feature-noise stream, data order and splits.
    pub seed: u64,
    /// Validate every this many epochs (0: only after the last epoch).
    pub eval_every: usize,
}

impl Default for ExperimentSpec {
    fn default() -> Self {
        ExperimentSpec {
            loss: LossConfig::default(),
            network: NetworkConfig::default(),
            data: DataSpec::default(),
            optimizer: AdamConfig::default(),
            batch_size: 1,
            epochs: 200,
            seed: 0,
            eval_every: 1,
        }
    }
}

impl ExperimentSpec {
    /// Phantom-scale settings: depth-2 network at 64x64 on the default
    /// three-organ phantom.
    pub fn desk() -> Self {
        let phantom = PhantomConfig::default();
        ExperimentSpec {
            network: NetworkConfig::desk(phantom.num_classes()),
            data: DataSpec { source: DatasetSource::Phantom { config: phantom, seed: 0 }, ..DataSpec::default() },
            epochs: 20,
            ..ExperimentSpec::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.network.validate()?;
        self.optimizer.validate()?;
        self.data.window.validate()?;
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be >= 1".into()));
        }
        if self.data.folds == 0 || self.data.fold >= self.data.folds {
            return Err(Error::Config(format!(
                "fold {} out of range for {} folds",
                self.data.fold, self.data.folds
            )));
        }
        if let DatasetSource::Phantom { config, .. } = &self.data.source {
            config.validate()?;
            if config.num_classes() != self.network.num_classes {
                return Err(Error::Config(format!(
                    "phantom has {} classes but the network predicts {}",
                    config.num_classes(),
                    self.network.num_classes
                )));
            }
        }
        Ok(())
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let spec: ExperimentSpec = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Serde(e.to_string()))
    }

    /// Reads a TOML experiment; a relative manifest path resolves against its file's
    /// directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut spec = Self::from_toml(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })?;
        if let DatasetSource::Manifest { path: m } = &mut spec.data.source {
            if m.is_relative() {
                if let Some(dir) = path.parent() {
                    *m = dir.join(&*m);
                }
            }
        }
        Ok(spec)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_toml()?).map_err(|e| Error::io(path, e))
    }
}
