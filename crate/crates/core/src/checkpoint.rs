//! Checkpoints: a JSON manifest (`*.ckpt`) next to one raw little-endian
//! float file (`*.ckpt.bin`) holding every weight tensor back to back.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{ModelConfig, ModelError, ModelParams, Subnet};
use crate::tensor::{Scalar, Tensor};

pub const FORMAT: &str = "normscape-checkpoint/1";

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: malformed manifest: {message}")]
    Manifest { path: PathBuf, message: String },
    #[error("{path}: layer `{layer}` spans bytes {start}..{end} but the data file has {len}")]
    Truncated {
        path: PathBuf,
        layer: String,
        start: usize,
        end: usize,
        len: usize,
    },
    #[error(transparent)]
    Model(#[from] ModelError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LayerEntry {
    pub name: String,
    pub subnet: Subnet,
    pub shape: Vec<usize>,
    pub dtype: String,
    pub offset: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointManifest {
    pub format: String,
    pub model: ModelConfig,
    pub data_file: String,
    pub layers: Vec<LayerEntry>,
    /// Opaque caller state (trainer progress) stored alongside the weights.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub state: Option<serde_json::Value>,
}

fn io(path: &Path) -> impl FnOnce(std::io::Error) -> CheckpointError + '_ {
    move |source| CheckpointError::Io {
        path: path.to_path_buf(),
        source,
    }
}

pub fn data_path(manifest_path: &Path) -> PathBuf {
    let mut name = manifest_path.file_name().expect("checkpoint file name").to_os_string();
    name.push(".bin");
    manifest_path.with_file_name(name)
}

pub fn save_checkpoint<T: Scalar>(
    path: &Path,
    params: &ModelParams<T>,
    state: Option<serde_json::Value>,
) -> Result<(), CheckpointError> {
    let bin = data_path(path);
    let mut bytes = Vec::new();
    let mut layers = Vec::new();
    for l in &params.layers {
        layers.push(LayerEntry {
            name: l.name.clone(),
            subnet: l.subnet,
            shape: l.weight.shape().to_vec(),
            dtype: T::DTYPE.to_string(),
            offset: bytes.len(),
        });
        for &v in l.weight.data() {
            v.write_le(&mut bytes);
        }
    }
    let manifest = CheckpointManifest {
        format: FORMAT.to_string(),
        model: params.config.clone(),
        data_file: bin.file_name().expect("data file name").to_string_lossy().into_owned(),
        layers,
        state,
    };
    fs::write(&bin, &bytes).map_err(io(&bin))?;
    let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    fs::write(path, text + "\n").map_err(io(path))
}

pub fn read_manifest(path: &Path) -> Result<CheckpointManifest, CheckpointError> {
    let text = fs::read_to_string(path).map_err(io(path))?;
    let manifest: CheckpointManifest = serde_json::from_str(&text).map_err(|e| CheckpointError::Manifest {
        path: path.to_path_buf(),
        message: e.to_string(),
    })?;
    if manifest.format != FORMAT {
        return Err(CheckpointError::Manifest {
            path: path.to_path_buf(),
            message: format!("unknown format `{}`", manifest.format),
        });
    }
    Ok(manifest)
}

fn decode<T: Scalar, S: Scalar>(raw: &[u8]) -> Vec<T> {
    raw.chunks_exact(S::BYTES)
        .map(|c| T::from_f64_lossy(S::read_le(c).as_f64()))
        .collect()
}

/// Loads weights into precision `T`; values stored at another precision are converted.
pub fn load_checkpoint<T: Scalar>(
    path: &Path,
) -> Result<(ModelParams<T>, Option<serde_json::Value>), CheckpointError> {
    let manifest = read_manifest(path)?;
    let bin = path.with_file_name(&manifest.data_file);
    let bytes = fs::read(&bin).map_err(io(&bin))?;
    let mut weights = Vec::with_capacity(manifest.layers.len());
    for entry in &manifest.layers {
        let width = match entry.dtype.as_str() {
            "f32" => 4,
            "f64" => 8,
            other => {
                return Err(CheckpointError::Manifest {
                    path: path.to_path_buf(),
                    message: format!("layer `{}` has unsupported dtype `{other}`", entry.name),
                })
            }
        };
        let count: usize = entry.shape.iter().product();
        let (start, end) = (entry.offset, entry.offset + count * width);
        if end > bytes.len() {
            return Err(CheckpointError::Truncated {
                path: bin.clone(),
                layer: entry.name.clone(),
                start,
                end,
                len: bytes.len(),
            });
        }
        let raw = &bytes[start..end];
        let data = if width == 4 { decode::<T, f32>(raw) } else { decode::<T, f64>(raw) };
        let t = Tensor::new(&entry.shape, data).map_err(ModelError::from)?;
        weights.push(t);
    }
    let params = ModelParams::from_weights(manifest.model.clone(), weights)?;
    for (l, e) in params.layers.iter().zip(&manifest.layers) {
        if l.name != e.name || l.subnet != e.subnet {
            return Err(CheckpointError::Manifest {
                path: path.to_path_buf(),
                message: format!("layer `{}` ({:?}) where `{}` was expected", e.name, e.subnet, l.name),
            });
        }
    }
    Ok((params, manifest.state))
}
