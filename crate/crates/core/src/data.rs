//! Dataset manifests, luminance decoding, patch extraction and mini-batching.

use std::fs;
use std::path::{Path, PathBuf};

use image::{DynamicImage, GenericImageView};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::bicubic::{bicubic_resize, Factor, ResizeError};
use crate::tensor::{Scalar, Tensor};

pub const PATCH_SIZE: usize = 41;
pub const PATCH_STRIDE: usize = 21;
pub const DEFAULT_BATCH_SIZE: usize = 64;
pub const DEFAULT_HOLDOUT: usize = 5;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: cannot decode image: {message}")]
    Decode { path: PathBuf, message: String },
    #[error("{path}: unsupported pixel format {format} (8-bit gray or RGB expected)")]
    BitDepth { path: PathBuf, format: String },
    #[error("{path}: checksum mismatch (manifest {expected}, file {actual})")]
    Checksum {
        path: PathBuf,
        expected: String,
        actual: String,
    },
    #[error("manifest {path}: {message}")]
    Manifest { path: PathBuf, message: String },
    #[error("no images found in {0}")]
    EmptyDirectory(PathBuf),
    #[error("{patches} patches cannot fill a single batch of {batch_size}")]
    TooFewPatches { patches: usize, batch_size: usize },
    #[error("no usable training patches")]
    NoPatches,
    #[error(transparent)]
    Resize(#[from] ResizeError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Train,
    Eval,
    Validation,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub path: PathBuf,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub role: Role,
    pub scale: usize,
    pub entries: Vec<ManifestEntry>,
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> DataError + '_ {
    move |source| DataError::Io {
        path: path.to_path_buf(),
        source,
    }
}

pub fn sha256_file(path: &Path) -> Result<String, DataError> {
    let bytes = fs::read(path).map_err(io_err(path))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

fn is_image(path: &Path) -> bool {
    matches!(
        path.extension().and_then(|e| e.to_str()).map(|e| e.to_ascii_lowercase()).as_deref(),
        Some("png" | "bmp")
    )
}

/// PNG and BMP files directly inside `dir`, sorted by file name.
pub fn list_images(dir: &Path) -> Result<Vec<PathBuf>, DataError> {
    let mut out = Vec::new();
    for entry in fs::read_dir(dir).map_err(io_err(dir))? {
        let path = entry.map_err(io_err(dir))?.path();
        if path.is_file() && is_image(&path) {
            out.push(path);
        }
    }
    out.sort();
    Ok(out)
}

impl DatasetManifest {
    pub fn from_paths(role: Role, scale: usize, paths: &[PathBuf]) -> Result<Self, DataError> {
        let entries = paths
            .iter()
            .map(|p| {
                let path = fs::canonicalize(p).map_err(io_err(p))?;
                let sha256 = sha256_file(&path)?;
                Ok(ManifestEntry { path, sha256 })
            })
            .collect::<Result<Vec<_>, DataError>>()?;
        Ok(DatasetManifest { role, scale, entries })
    }

    pub fn load(path: &Path) -> Result<Self, DataError> {
        let text = fs::read_to_string(path).map_err(io_err(path))?;
        serde_json::from_str(&text).map_err(|e| DataError::Manifest {
            path: path.to_path_buf(),
            message: e.to_string(),
        })
    }

    pub fn save(&self, path: &Path) -> Result<(), DataError> {
        let text = serde_json::to_string_pretty(self).expect("manifest serializes");
        fs::write(path, text + "\n").map_err(io_err(path))
    }

    /// Every file exists and matches its checksum.
    pub fn verify(&self) -> Result<(), DataError> {
        for e in &self.entries {
            let actual = sha256_file(&e.path)?;
            if actual != e.sha256 {
                return Err(DataError::Checksum {
                    path: e.path.clone(),
                    expected: e.sha256.clone(),
                    actual,
                });
            }
        }
        Ok(())
    }
}

/// Seeded split of `paths` into `(train, holdout)`; both keep their input order.
pub fn split_holdout(paths: &[PathBuf], holdout: usize, seed: u64) -> (Vec<PathBuf>, Vec<PathBuf>) {
    let holdout = holdout.min(paths.len().saturating_sub(1));
    let mut idx: Vec<usize> = (0..paths.len()).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut chosen = idx[..holdout].to_vec();
    chosen.sort_unstable();
    let (mut train, mut held) = (Vec::new(), Vec::new());
    for (i, p) in paths.iter().enumerate() {
        if chosen.binary_search(&i).is_ok() {
            held.push(p.clone());
        } else {
            train.push(p.clone());
        }
    }
    (train, held)
}

/// ITU-R BT.601 luma of an 8-bit sRGB value triple, scaled to `[0, 1]`.
pub fn bt601_luma(r: u8, g: u8, b: u8) -> f64 {
    let (r, g, b) = (r as f64 / 255.0, g as f64 / 255.0, b as f64 / 255.0);
    (16.0 + 65.481 * r + 128.553 * g + 24.966 * b) / 255.0
}

pub fn luminance_of(img: &DynamicImage) -> Tensor<f64> {
    let (w, h) = img.dimensions();
    let rgb = img.to_rgb8();
    let data = rgb.pixels().map(|p| bt601_luma(p[0], p[1], p[2])).collect();
    Tensor::new(&[1, h as usize, w as usize], data).expect("image dimensions")
}

/// Decodes a PNG or BMP into a `[1, H, W]` luminance plane.
pub fn load_image_luminance(path: &Path) -> Result<Tensor<f64>, DataError> {
    let bytes = fs::read(path).map_err(io_err(path))?;
    let img = image::load_from_memory(&bytes).map_err(|e| DataError::Decode {
        path: path.to_path_buf(),
        message: e.to_string(),
    })?;
    match img {
        DynamicImage::ImageLuma8(_)
        | DynamicImage::ImageLumaA8(_)
        | DynamicImage::ImageRgb8(_)
        | DynamicImage::ImageRgba8(_) => Ok(luminance_of(&img)),
        other => Err(DataError::BitDepth {
            path: path.to_path_buf(),
            format: format!("{:?}", other.color()),
        }),
    }
}

/// Crops the bottom/right edges so both sides are multiples of `scale`.
pub fn modcrop(img: &Tensor<f64>, scale: usize) -> Tensor<f64> {
    let (h, w) = (img.shape()[1], img.shape()[2]);
    let (ch, cw) = (h - h % scale, w - w % scale);
    crop(img, 0, 0, ch, cw)
}

fn crop(img: &Tensor<f64>, y0: usize, x0: usize, h: usize, w: usize) -> Tensor<f64> {
    let width = img.shape()[2];
    let mut data = Vec::with_capacity(h * w);
    for y in y0..y0 + h {
        data.extend_from_slice(&img.data()[y * width + x0..y * width + x0 + w]);
    }
    Tensor::new(&[1, h, w], data).expect("crop inside image")
}

/// Ground truth and network input for one image.
#[derive(Debug, Clone)]
pub struct ImagePair {
    pub name: String,
    /// Modcropped high-resolution luminance, `[1, H, W]`.
    pub hr: Tensor<f64>,
    /// Bicubic down-then-up version of `hr`, same shape.
    pub lr_upscaled: Tensor<f64>,
}

/// Builds the degraded input for an HR plane at `scale`.
pub fn degrade(hr: &Tensor<f64>, scale: usize) -> Result<ImagePair, DataError> {
    let hr = modcrop(hr, scale);
    let lr = bicubic_resize(&hr, Factor::Down(scale))?;
    let lr_upscaled = bicubic_resize(&lr, Factor::Up(scale))?;
    Ok(ImagePair {
        name: String::new(),
        hr,
        lr_upscaled,
    })
}

pub fn load_pairs(manifest: &DatasetManifest) -> Result<Vec<ImagePair>, DataError> {
    manifest
        .entries
        .par_iter()
        .map(|e| {
            let hr = load_image_luminance(&e.path)?;
            let mut pair = degrade(&hr, manifest.scale)?;
            pair.name = e
                .path
                .file_stem()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_default();
            Ok(pair)
        })
        .collect()
}

/// Top-left offsets of all patches along an axis of length `len`.
pub fn patch_positions(len: usize, size: usize, stride: usize) -> Vec<usize> {
    if len < size {
        return Vec::new();
    }
    (0..=(len - size) / stride).map(|i| i * stride).collect()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PatchOrigin {
    pub image: usize,
    pub y: usize,
    pub x: usize,
}

/// Aligned input/target patches, `[P, 1, size, size]` each.
#[derive(Debug, Clone)]
pub struct PatchSet<T> {
    pub inputs: Tensor<T>,
    pub targets: Tensor<T>,
    pub origins: Vec<PatchOrigin>,
    pub patch_size: usize,
    pub stride: usize,
}

impl<T: Scalar> PatchSet<T> {
    pub fn len(&self) -> usize {
        self.origins.len()
    }

    pub fn is_empty(&self) -> bool {
        self.origins.is_empty()
    }

    pub fn from_pairs(pairs: &[ImagePair], size: usize, stride: usize) -> Result<Self, DataError> {
        let mut inputs = Vec::new();
        let mut targets = Vec::new();
        let mut origins = Vec::new();
        for (image, pair) in pairs.iter().enumerate() {
            let (h, w) = (pair.hr.shape()[1], pair.hr.shape()[2]);
            let ys = patch_positions(h, size, stride);
            let xs = patch_positions(w, size, stride);
            if ys.is_empty() || xs.is_empty() {
                log::warn!("skipping {} ({w}×{h}): smaller than one {size}×{size} patch", pair.name);
                continue;
            }
            for &y in &ys {
                for &x in &xs {
                    let src = crop(&pair.lr_upscaled, y, x, size, size);
                    let dst = crop(&pair.hr, y, x, size, size);
                    inputs.extend(src.data().iter().map(|&v| T::from_f64_lossy(v)));
                    targets.extend(dst.data().iter().map(|&v| T::from_f64_lossy(v)));
                    origins.push(PatchOrigin { image, y, x });
                }
            }
        }
        if origins.is_empty() {
            return Err(DataError::NoPatches);
        }
        let shape = [origins.len(), 1, size, size];
        Ok(PatchSet {
            inputs: Tensor::new(&shape, inputs).expect("patch shape"),
            targets: Tensor::new(&shape, targets).expect("patch shape"),
            origins,
            patch_size: size,
            stride,
        })
    }

    /// Gathers the listed patches into a batch.
    pub fn gather(&self, indices: &[usize]) -> (Tensor<T>, Tensor<T>) {
        let per = self.patch_size * self.patch_size;
        let take = |t: &Tensor<T>| {
            let mut data = Vec::with_capacity(indices.len() * per);
            for &i in indices {
                data.extend_from_slice(&t.data()[i * per..(i + 1) * per]);
            }
            Tensor::new(&[indices.len(), 1, self.patch_size, self.patch_size], data).expect("batch shape")
        };
        (take(&self.inputs), take(&self.targets))
    }
}

/// Loads the manifest's images and tiles them into 41×41 patches at stride 21.
pub fn make_training_pairs<T: Scalar>(manifest: &DatasetManifest) -> Result<PatchSet<T>, DataError> {
    let pairs = load_pairs(manifest)?;
    PatchSet::from_pairs(&pairs, PATCH_SIZE, PATCH_STRIDE)
}

pub fn steps_per_epoch(patches: usize, batch_size: usize) -> usize {
    patches / batch_size
}

/// Shuffled batch index lists for one epoch; the permutation depends only on
/// `(seed, epoch)` and the trailing partial batch is dropped.
pub fn batches(patches: usize, batch_size: usize, epoch: usize, seed: u64) -> Result<Vec<Vec<usize>>, DataError> {
    if patches < batch_size || batch_size == 0 {
        return Err(DataError::TooFewPatches { patches, batch_size });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch as u64);
    let mut order: Vec<usize> = (0..patches).collect();
    order.shuffle(&mut rng);
    Ok(order
        .chunks_exact(batch_size)
        .map(|c| c.to_vec())
        .collect())
}
