//! The single JSON run configuration: model, objective, trainer and data
//! sections, each defaulting to the reference experiment.

use std::fs;
use std::path::{Path, PathBuf};

use normscape_core::data::{DEFAULT_HOLDOUT, PATCH_SIZE, PATCH_STRIDE};
use normscape_core::{ModelConfig, ObjectiveConfig, TrainConfig};
use serde::{Deserialize, Serialize};

use crate::error::CliError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// Directory written by `prepare-data`; takes precedence over the dirs below.
    pub manifest_dir: Option<PathBuf>,
    pub train_dir: Option<PathBuf>,
    pub eval_dir: Option<PathBuf>,
    pub scale: usize,
    /// Training images held out for the plateau rule.
    pub holdout: usize,
    pub holdout_seed: u64,
    pub patch_size: usize,
    pub patch_stride: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            manifest_dir: None,
            train_dir: None,
            eval_dir: None,
            scale: 2,
            holdout: DEFAULT_HOLDOUT,
            holdout_seed: 0,
            patch_size: PATCH_SIZE,
            patch_stride: PATCH_STRIDE,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub objective: ObjectiveConfig,
    pub train: TrainConfig,
    pub data: DataConfig,
}

impl RunConfig {
    /// Reads `path`, or returns the defaults when no file is given.
    pub fn load(path: Option<&Path>) -> Result<Self, CliError> {
        let cfg = match path {
            None => RunConfig::default(),
            Some(p) => {
                let text = fs::read_to_string(p).map_err(|e| CliError::Usage(format!("{}: {e}", p.display())))?;
                let mut cfg: RunConfig =
                    serde_json::from_str(&text).map_err(|e| CliError::Usage(format!("{}: {e}", p.display())))?;
                cfg.resolve_paths(p.parent().unwrap_or(Path::new(".")));
                cfg
            }
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// Relative data paths are taken relative to the config file.
    fn resolve_paths(&mut self, base: &Path) {
        for p in [&mut self.data.manifest_dir, &mut self.data.train_dir, &mut self.data.eval_dir]
            .into_iter()
            .flatten()
        {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
    }

    pub fn validate(&self) -> Result<(), CliError> {
        self.model.validate().map_err(|e| CliError::Usage(e.to_string()))?;
        self.objective.validate().map_err(CliError::Usage)?;
        self.train.validate().map_err(|e| CliError::Usage(e.to_string()))?;
        if self.data.scale != self.model.scale_factor {
            return Err(CliError::Usage(format!(
                "data.scale ({}) must equal model.scale_factor ({})",
                self.data.scale, self.model.scale_factor
            )));
        }
        if self.data.patch_size == 0 || self.data.patch_stride == 0 {
            return Err(CliError::Usage("patch_size and patch_stride must be positive".into()));
        }
        Ok(())
    }

    /// Writes `config.resolved.json` (every field, defaults filled in) into `out`.
    pub fn write_resolved(&self, out: &Path) -> Result<PathBuf, CliError> {
        fs::create_dir_all(out).map_err(|e| CliError::io(out, e))?;
        let path = out.join("config.resolved.json");
        let text = serde_json::to_string_pretty(self).expect("config serializes");
        fs::write(&path, text + "\n").map_err(|e| CliError::io(&path, e))?;
        Ok(path)
    }
}
