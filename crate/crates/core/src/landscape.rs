//! PSNR evaluation and the per-epoch landscape: CSV records, stage
//! segmentation and SVG charts.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::ImagePair;
use crate::model::{forward, ModelError, ModelParams};
use crate::objective::NormSetting;
use crate::svg::{LineChart, Marker, Series};
use crate::tensor::{Scalar, Tensor};

/// Reported PSNR when the two images are identical.
pub const PSNR_CAP: f64 = 100.0;

pub const STAGE_LEN: usize = 15;

pub const CSV_HEADER: &str =
    "setting,epoch,global_step,lr,alpha,l1_term,l2_term,l3_term,total_loss,validation_error,psnr_eval,stage";

pub const SVG_FILES: [&str; 4] = ["stage1.svg", "stage2.svg", "stage3.svg", "all_stages.svg"];

#[derive(Debug, Error)]
pub enum LandscapeError {
    #[error("PSNR region is empty after shaving {shave}px from {h}×{w}")]
    EmptyRegion { shave: usize, h: usize, w: usize },
    #[error("PSNR inputs differ in shape: {0:?} vs {1:?}")]
    Shape(Vec<usize>, Vec<usize>),
    #[error("evaluation set is empty")]
    NoImages,
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {source}")]
    Csv {
        path: PathBuf,
        #[source]
        source: csv::Error,
    },
    #[error("{path}: header is `{found}`, expected `{CSV_HEADER}`")]
    Header { path: PathBuf, found: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PsnrOptions {
    /// Border pixels removed from every side.
    pub shave: usize,
    /// Round to 8-bit levels before measuring.
    pub quantize: bool,
}

impl PsnrOptions {
    pub fn for_scale(scale: usize) -> Self {
        PsnrOptions {
            shave: scale,
            quantize: true,
        }
    }
}

/// PSNR in dB on the 8-bit scale over the last two axes of `[.., H, W]` tensors
/// holding values in `[0, 1]`.
pub fn psnr<T: Scalar>(reference: &Tensor<T>, candidate: &Tensor<T>, opts: PsnrOptions) -> Result<f64, LandscapeError> {
    if reference.shape() != candidate.shape() {
        return Err(LandscapeError::Shape(reference.shape().to_vec(), candidate.shape().to_vec()));
    }
    let rank = reference.shape().len();
    let (h, w) = (reference.shape()[rank - 2], reference.shape()[rank - 1]);
    let s = opts.shave;
    if 2 * s >= h || 2 * s >= w {
        return Err(LandscapeError::EmptyRegion { shave: s, h, w });
    }
    let level = |v: T| {
        let v = v.as_f64() * 255.0;
        if opts.quantize {
            v.clamp(0.0, 255.0).round()
        } else {
            v
        }
    };
    let planes = reference.len() / (h * w);
    let (mut sum, mut count) = (0.0, 0usize);
    for p in 0..planes {
        for y in s..h - s {
            let row = p * h * w + y * w;
            for x in s..w - s {
                let d = level(reference.data()[row + x]) - level(candidate.data()[row + x]);
                sum += d * d;
                count += 1;
            }
        }
    }
    let mse = sum / count as f64;
    if mse == 0.0 {
        return Ok(PSNR_CAP);
    }
    Ok((10.0 * (255.0f64 * 255.0 / mse).log10()).min(PSNR_CAP))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub mean_psnr: f64,
    pub per_image: Vec<(String, f64)>,
}

fn mean_report(per_image: Vec<(String, f64)>) -> Result<EvalReport, LandscapeError> {
    if per_image.is_empty() {
        return Err(LandscapeError::NoImages);
    }
    let mean_psnr = per_image.iter().map(|(_, p)| p).sum::<f64>() / per_image.len() as f64;
    Ok(EvalReport { mean_psnr, per_image })
}

/// Bicubic-upscaled input against ground truth, averaged in set order.
pub fn evaluate_baseline(pairs: &[ImagePair], opts: PsnrOptions) -> Result<EvalReport, LandscapeError> {
    let per_image = pairs
        .par_iter()
        .map(|p| Ok((p.name.clone(), psnr(&p.hr, &p.lr_upscaled, opts)?)))
        .collect::<Result<Vec<_>, LandscapeError>>()?;
    mean_report(per_image)
}

/// Whole-image forward passes, scored on the final output.
pub fn evaluate_model<T: Scalar>(
    params: &ModelParams<T>,
    pairs: &[ImagePair],
    opts: PsnrOptions,
) -> Result<EvalReport, LandscapeError> {
    let mut per_image = Vec::with_capacity(pairs.len());
    for p in pairs {
        let (h, w) = (p.hr.shape()[1], p.hr.shape()[2]);
        let x: Tensor<T> = p.lr_upscaled.cast::<T>().reshape(&[1, 1, h, w]).expect("luma plane");
        let y = forward(params, &x)?.y_learned.reshape(&[1, h, w]).expect("luma plane");
        per_image.push((p.name.clone(), psnr(&p.hr, &y.cast::<f64>(), opts)?));
    }
    mean_report(per_image)
}

pub fn stage_of(epoch: usize) -> u8 {
    match epoch {
        0..=STAGE_LEN => 1,
        16..=30 => 2,
        _ => 3,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LandscapeRecord {
    pub setting: NormSetting,
    pub epoch: usize,
    pub global_step: usize,
    pub lr: f64,
    pub alpha: f64,
    pub l1_term: f64,
    pub l2_term: f64,
    pub l3_term: f64,
    pub total_loss: f64,
    pub validation_error: f64,
    pub psnr_eval: f64,
    pub stage: u8,
}

pub fn write_csv(path: &Path, records: &[LandscapeRecord]) -> Result<(), LandscapeError> {
    let csv_err = |source| LandscapeError::Csv {
        path: path.to_path_buf(),
        source,
    };
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    if records.is_empty() {
        w.write_record(CSV_HEADER.split(',')).map_err(csv_err)?;
    }
    for r in records {
        w.serialize(r).map_err(csv_err)?;
    }
    w.flush().map_err(|source| LandscapeError::Io {
        path: path.to_path_buf(),
        source,
    })
}

pub fn read_csv(path: &Path) -> Result<Vec<LandscapeRecord>, LandscapeError> {
    let csv_err = |source| LandscapeError::Csv {
        path: path.to_path_buf(),
        source,
    };
    let mut r = csv::Reader::from_path(path).map_err(csv_err)?;
    let header = r.headers().map_err(csv_err)?.iter().collect::<Vec<_>>().join(",");
    if header != CSV_HEADER {
        return Err(LandscapeError::Header {
            path: path.to_path_buf(),
            found: header,
        });
    }
    r.deserialize().collect::<Result<Vec<_>, _>>().map_err(csv_err)
}

fn style(setting: NormSetting) -> (&'static str, Marker, &'static str) {
    match setting {
        NormSetting::Mix => ("Mix", Marker::Star, "#d62728"),
        NormSetting::AllL2 => ("All-L2", Marker::Square, "#1f77b4"),
        NormSetting::AllL1 => ("All-L1", Marker::Dot, "#2ca02c"),
    }
}

fn by_setting(records: &[LandscapeRecord]) -> BTreeMap<u8, (NormSetting, Vec<&LandscapeRecord>)> {
    let mut map: BTreeMap<u8, (NormSetting, Vec<&LandscapeRecord>)> = BTreeMap::new();
    for r in records {
        let key = match r.setting {
            NormSetting::Mix => 0,
            NormSetting::AllL2 => 1,
            NormSetting::AllL1 => 2,
        };
        map.entry(key).or_insert_with(|| (r.setting, Vec::new())).1.push(r);
    }
    map
}

/// PSNR-vs-epoch chart for one stage (`Some(1..=3)`) or all of them.
pub fn stage_chart(records: &[LandscapeRecord], stage: Option<u8>) -> LineChart {
    let title = match stage {
        Some(s) => format!("Training dynamic, stage {s}"),
        None => "Training dynamic, all stages".to_string(),
    };
    let series = by_setting(records)
        .into_values()
        .map(|(setting, rs)| {
            let (name, marker, color) = style(setting);
            Series {
                name: name.to_string(),
                marker,
                color,
                points: rs
                    .iter()
                    .filter(|r| stage.is_none_or(|s| r.stage == s))
                    .map(|r| (r.epoch as f64, r.psnr_eval))
                    .collect(),
            }
        })
        .collect();
    LineChart {
        title,
        x_label: "epoch".into(),
        y_label: "PSNR (dB)".into(),
        series,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageMean {
    pub setting: NormSetting,
    pub stage: u8,
    pub mean_psnr: f64,
    pub epochs: usize,
}

/// Stage-mean PSNR of setting `first` against `second`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageComparison {
    pub stage: u8,
    pub first: NormSetting,
    pub second: NormSetting,
    pub first_mean: f64,
    pub second_mean: f64,
    pub first_higher: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageReport {
    pub means: Vec<StageMean>,
    /// Mix vs All-L1 and All-L2 vs Mix on stages 2 and 3, where both settings have data.
    pub comparisons: Vec<StageComparison>,
}

pub fn stage_report(records: &[LandscapeRecord]) -> StageReport {
    let mut means = Vec::new();
    for (setting, rs) in by_setting(records).into_values() {
        for stage in 1..=3u8 {
            let vals: Vec<f64> = rs.iter().filter(|r| r.stage == stage).map(|r| r.psnr_eval).collect();
            if !vals.is_empty() {
                means.push(StageMean {
                    setting,
                    stage,
                    mean_psnr: vals.iter().sum::<f64>() / vals.len() as f64,
                    epochs: vals.len(),
                });
            }
        }
    }
    let find = |s: NormSetting, st: u8| means.iter().find(|m| m.setting == s && m.stage == st).map(|m| m.mean_psnr);
    let mut comparisons = Vec::new();
    for stage in [2u8, 3] {
        for (first, second) in [(NormSetting::Mix, NormSetting::AllL1), (NormSetting::AllL2, NormSetting::Mix)] {
            if let (Some(a), Some(b)) = (find(first, stage), find(second, stage)) {
                comparisons.push(StageComparison {
                    stage,
                    first,
                    second,
                    first_mean: a,
                    second_mean: b,
                    first_higher: a > b,
                });
            }
        }
    }
    StageReport { means, comparisons }
}

#[derive(Debug, Clone)]
pub struct EmittedFiles {
    pub csv: PathBuf,
    pub svgs: Vec<PathBuf>,
    pub stage_report: PathBuf,
}

/// Writes `landscape.csv`, the four stage charts and `stage_report.json` into `out_dir`.
pub fn emit_landscape(records: &[LandscapeRecord], out_dir: &Path) -> Result<(EmittedFiles, StageReport), LandscapeError> {
    let io = |path: &Path| {
        let path = path.to_path_buf();
        move |source| LandscapeError::Io { path, source }
    };
    fs::create_dir_all(out_dir).map_err(io(out_dir))?;
    let csv = out_dir.join("landscape.csv");
    write_csv(&csv, records)?;
    let mut svgs = Vec::new();
    for (i, name) in SVG_FILES.iter().enumerate() {
        let stage = (i < 3).then_some(i as u8 + 1);
        let path = out_dir.join(name);
        fs::write(&path, stage_chart(records, stage).render()).map_err(io(&path))?;
        svgs.push(path);
    }
    let report = stage_report(records);
    let stage_path = out_dir.join("stage_report.json");
    let text = serde_json::to_string_pretty(&report).expect("report serializes");
    fs::write(&stage_path, text + "\n").map_err(io(&stage_path))?;
    Ok((
        EmittedFiles {
            csv,
            svgs,
            stage_report: stage_path,
        },
        report,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn plane(v: Vec<f64>, h: usize, w: usize) -> Tensor<f64> {
        Tensor::new(&[1, h, w], v).unwrap()
    }

    const RAW: PsnrOptions = PsnrOptions { shave: 0, quantize: true };

    #[test]
    fn identical_images_hit_the_cap() {
        let a = plane(vec![0.3; 16], 4, 4);
        assert_eq!(psnr(&a, &a, RAW).unwrap(), PSNR_CAP);
    }

    #[test]
    fn known_mse_values() {
        let a = plane(vec![100.0 / 255.0; 16], 4, 4);
        let b = plane(vec![101.0 / 255.0; 16], 4, 4);
        assert!((psnr(&a, &b, RAW).unwrap() - 48.1308).abs() < 1e-4);
        let c = plane(vec![116.0 / 255.0; 16], 4, 4);
        assert!((psnr(&a, &c, RAW).unwrap() - 20.0 * (255.0f64 / 16.0).log10()).abs() < 1e-9);
    }

    #[test]
    fn shave_removes_the_border() {
        let a = plane(vec![0.5; 36], 6, 6);
        let mut v = vec![0.5; 36];
        v[0] = 0.0;
        let b = plane(v, 6, 6);
        assert_eq!(psnr(&a, &b, PsnrOptions { shave: 1, quantize: true }).unwrap(), PSNR_CAP);
        assert!(psnr(&a, &b, RAW).unwrap() < PSNR_CAP);
        assert!(matches!(
            psnr(&a, &b, PsnrOptions { shave: 3, quantize: true }),
            Err(LandscapeError::EmptyRegion { .. })
        ));
    }

    #[test]
    fn stages() {
        assert_eq!(stage_of(1), 1);
        assert_eq!(stage_of(15), 1);
        assert_eq!(stage_of(16), 2);
        assert_eq!(stage_of(30), 2);
        assert_eq!(stage_of(31), 3);
        assert_eq!(stage_of(45), 3);
    }

    #[test]
    fn single_image_mean_equals_its_psnr() {
        let hr = plane((0..100).map(|i| i as f64 / 100.0).collect(), 10, 10);
        let up = hr.map(|v| (v + 0.02).min(1.0));
        let pair = ImagePair { name: "a".into(), hr: hr.clone(), lr_upscaled: up.clone() };
        let opts = PsnrOptions::for_scale(2);
        let report = evaluate_baseline(&[pair], opts).unwrap();
        assert_eq!(report.mean_psnr, psnr(&hr, &up, opts).unwrap());
        assert!(matches!(evaluate_baseline(&[], opts), Err(LandscapeError::NoImages)));
    }
}
