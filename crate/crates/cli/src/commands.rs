//! Command implementations. Each returns a serializable report; printing is
//! left to the binary.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use normscape_core::checkpoint::read_manifest;
use normscape_core::data::{
    list_images, load_image_luminance, load_pairs, split_holdout, steps_per_epoch, DatasetManifest, ImagePair,
    PatchSet, Role,
};
use normscape_core::gradcheck::check_model;
use normscape_core::landscape::{emit_landscape, evaluate_baseline, evaluate_model, LandscapeRecord, PsnrOptions, StageReport};
use normscape_core::model::{build_model, count_params_for, sparsity_report, ModelConfig, SparsityReport};
use normscape_core::objective::NormSetting;
use normscape_core::synthetic::write_synthetic_set;
use normscape_core::trainer::{self, checkpoint_name, load_resume, TrainData, TrainOptions, TrainState};
use normscape_core::{
    Precision, Scalar, OVERPARAMETRIZATION_THRESHOLD, REFERENCE_PARAM_COUNT, REFERENCE_STEP_BUDGET,
};
use serde::Serialize;

use crate::config::RunConfig;
use crate::error::CliError;

pub const TRAIN_MANIFEST: &str = "train.manifest.json";
pub const VALIDATION_MANIFEST: &str = "validation.manifest.json";
pub const EVAL_MANIFEST: &str = "eval.manifest.json";
pub const CHECKPOINT_DIR: &str = "checkpoints";
/// Magnitude below which a weight counts as zero in sparsity reports.
pub const SPARSITY_EPSILON: f64 = 1e-3;

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    }
    let text = serde_json::to_string_pretty(value).expect("report serializes");
    fs::write(path, text + "\n").map_err(|e| CliError::io(path, e))
}

// ---------------------------------------------------------------------------
// prepare-data
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize)]
pub struct SkippedImage {
    pub path: PathBuf,
    pub reason: String,
}

#[derive(Debug, Clone, Serialize)]
pub struct PrepareReport {
    pub train_images: usize,
    pub validation_images: usize,
    pub eval_images: usize,
    pub skipped: Vec<SkippedImage>,
    pub train_patches: usize,
    pub batch_size: usize,
    pub steps_per_epoch: usize,
    pub epochs: usize,
    pub total_steps: usize,
    pub reference_step_budget: usize,
    pub step_delta: i64,
}

/// Images in `dir` that decode, plus the ones that do not.
fn decodable_images(dir: &Path) -> Result<(Vec<PathBuf>, Vec<SkippedImage>), CliError> {
    let mut ok = Vec::new();
    let mut skipped = Vec::new();
    for path in list_images(dir)? {
        match load_image_luminance(&path) {
            Ok(_) => ok.push(path),
            Err(e) => {
                log::warn!("skipping {}: {e}", path.display());
                skipped.push(SkippedImage {
                    reason: e.to_string(),
                    path,
                });
            }
        }
    }
    if ok.is_empty() {
        return Err(CliError::Data(format!("no decodable images in {}", dir.display())));
    }
    Ok((ok, skipped))
}

pub fn prepare_data(
    train_dir: &Path,
    eval_dir: Option<&Path>,
    cfg: &RunConfig,
    out: &Path,
) -> Result<PrepareReport, CliError> {
    let scale = cfg.data.scale;
    let (images, mut skipped) = decodable_images(train_dir)?;
    if images.len() <= cfg.data.holdout {
        return Err(CliError::Data(format!(
            "{} has {} usable images; at least {} are needed to hold out {}",
            train_dir.display(),
            images.len(),
            cfg.data.holdout + 1,
            cfg.data.holdout
        )));
    }
    let (train, validation) = split_holdout(&images, cfg.data.holdout, cfg.data.holdout_seed);
    let train_m = DatasetManifest::from_paths(Role::Train, scale, &train)?;
    let val_m = DatasetManifest::from_paths(Role::Validation, scale, &validation)?;
    fs::create_dir_all(out).map_err(|e| CliError::io(out, e))?;
    train_m.save(&out.join(TRAIN_MANIFEST))?;
    val_m.save(&out.join(VALIDATION_MANIFEST))?;
    let mut eval_images = 0;
    if let Some(dir) = eval_dir {
        let (eval, eval_skipped) = decodable_images(dir)?;
        skipped.extend(eval_skipped);
        eval_images = eval.len();
        DatasetManifest::from_paths(Role::Eval, scale, &eval)?.save(&out.join(EVAL_MANIFEST))?;
    }
    let pairs = load_pairs(&train_m)?;
    let patches = PatchSet::<f32>::from_pairs(&pairs, cfg.data.patch_size, cfg.data.patch_stride)?.len();
    let spe = steps_per_epoch(patches, cfg.train.batch_size);
    let total = spe * cfg.train.epochs;
    let report = PrepareReport {
        train_images: train.len(),
        validation_images: validation.len(),
        eval_images,
        skipped,
        train_patches: patches,
        batch_size: cfg.train.batch_size,
        steps_per_epoch: spe,
        epochs: cfg.train.epochs,
        total_steps: total,
        reference_step_budget: REFERENCE_STEP_BUDGET,
        step_delta: total as i64 - REFERENCE_STEP_BUDGET as i64,
    };
    write_json(&out.join("patch_report.json"), &report)?;
    Ok(report)
}

// ---------------------------------------------------------------------------
// synth-data
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize)]
pub struct SynthReport {
    pub train_dir: PathBuf,
    pub eval_dir: PathBuf,
    pub train: usize,
    pub eval: usize,
}

pub fn synth_data(out: &Path, train: usize, eval: usize, width: u32, height: u32, seed: u64) -> Result<SynthReport, CliError> {
    let train_dir = out.join("train");
    let eval_dir = out.join("eval");
    write_synthetic_set(&train_dir, "train", train, width, height, seed).map_err(|e| CliError::Data(e.to_string()))?;
    write_synthetic_set(&eval_dir, "eval", eval, width, height, seed.wrapping_add(7919))
        .map_err(|e| CliError::Data(e.to_string()))?;
    Ok(SynthReport {
        train_dir,
        eval_dir,
        train,
        eval,
    })
}

// ---------------------------------------------------------------------------
// data resolution
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct Manifests {
    pub train: DatasetManifest,
    pub validation: DatasetManifest,
    pub eval: DatasetManifest,
}

/// Loads prepared manifests, or prepares them under `out/data` from the
/// configured directories.
pub fn resolve_manifests(cfg: &RunConfig, out: &Path) -> Result<Manifests, CliError> {
    let dir = match (&cfg.data.manifest_dir, &cfg.data.train_dir) {
        (Some(dir), _) => dir.clone(),
        (None, Some(train_dir)) => {
            let dir = out.join("data");
            prepare_data(train_dir, cfg.data.eval_dir.as_deref(), cfg, &dir)?;
            dir
        }
        (None, None) => {
            return Err(CliError::Usage(
                "no training data configured: set data.manifest_dir or data.train_dir".into(),
            ))
        }
    };
    let eval_path = dir.join(EVAL_MANIFEST);
    if !eval_path.exists() {
        return Err(CliError::Usage(format!(
            "{} is missing: an evaluation directory (data.eval_dir / --eval-dir) is required",
            eval_path.display()
        )));
    }
    let m = Manifests {
        train: DatasetManifest::load(&dir.join(TRAIN_MANIFEST))?,
        validation: DatasetManifest::load(&dir.join(VALIDATION_MANIFEST))?,
        eval: DatasetManifest::load(&eval_path)?,
    };
    for manifest in [&m.train, &m.validation, &m.eval] {
        manifest.verify()?;
        if manifest.scale != cfg.data.scale {
            return Err(CliError::Usage(format!(
                "manifest scale ×{} does not match data.scale ×{}",
                manifest.scale, cfg.data.scale
            )));
        }
    }
    Ok(m)
}

pub fn load_train_data<T: Scalar>(m: &Manifests, cfg: &RunConfig) -> Result<TrainData<T>, CliError> {
    let (size, stride) = (cfg.data.patch_size, cfg.data.patch_stride);
    Ok(TrainData {
        train: PatchSet::from_pairs(&load_pairs(&m.train)?, size, stride)?,
        validation: PatchSet::from_pairs(&load_pairs(&m.validation)?, size, stride)?,
        eval: load_pairs(&m.eval)?,
        psnr: PsnrOptions::for_scale(cfg.data.scale),
    })
}

// ---------------------------------------------------------------------------
// train / experiment
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Resume {
    Fresh,
    /// Continue from this checkpoint.
    From(PathBuf),
    /// Continue from the newest checkpoint of the setting, if any.
    Latest,
}

#[derive(Debug, Clone, Serialize)]
pub struct SettingSummary {
    pub setting: NormSetting,
    pub epochs: usize,
    pub global_step: usize,
    pub steps_per_epoch: usize,
    pub reference_step_budget: usize,
    pub initial_psnr: f64,
    pub final_psnr: f64,
    pub final_lr: f64,
    pub lr_drops: u32,
    pub sparsity: SparsityReport,
    pub final_checkpoint: Option<PathBuf>,
    pub seconds: f64,
    #[serde(skip)]
    pub records: Vec<LandscapeRecord>,
}

/// Newest `{setting}_{epoch}.ckpt` in `dir`.
pub fn latest_checkpoint(dir: &Path, setting: NormSetting) -> Option<PathBuf> {
    let prefix = format!("{setting}_");
    fs::read_dir(dir)
        .ok()?
        .filter_map(|e| e.ok())
        .filter_map(|e| {
            let name = e.file_name().into_string().ok()?;
            let epoch: usize = name.strip_prefix(&prefix)?.strip_suffix(".ckpt")?.parse().ok()?;
            Some((epoch, e.path()))
        })
        .max_by_key(|(epoch, _)| *epoch)
        .map(|(_, p)| p)
}

fn run_setting<T: Scalar>(
    cfg: &RunConfig,
    setting: NormSetting,
    data: &TrainData<T>,
    out: &Path,
    resume: &Resume,
) -> Result<SettingSummary, CliError> {
    let start = Instant::now();
    let train_cfg = normscape_core::TrainConfig {
        setting,
        ..cfg.train.clone()
    };
    let ckpt_dir = out.join(CHECKPOINT_DIR);
    let resume_from = match resume {
        Resume::Fresh => None,
        Resume::From(p) => Some(p.clone()),
        Resume::Latest => latest_checkpoint(&ckpt_dir, setting),
    };
    let (params, state): (_, Option<TrainState>) = match &resume_from {
        Some(path) => {
            let (params, state) = load_resume::<T>(path)?;
            if params.config != cfg.model {
                return Err(CliError::Usage(format!("{} was written for a different model config", path.display())));
            }
            log::info!("{setting}: resuming from {} (epoch {})", path.display(), state.epoch);
            (params, Some(state))
        }
        None => (build_model::<T>(&cfg.model, cfg.train.seed)?, None),
    };
    let opts = TrainOptions {
        checkpoint_dir: Some(ckpt_dir.clone()),
        stop_after: None,
    };
    let outcome = trainer::train(&train_cfg, &cfg.objective, data, params, state, &opts, |r| {
        log::info!(
            "{} epoch {:>2}  loss {:.5}  val {:.5}  psnr {:.3} dB  lr {:.1e}",
            r.setting,
            r.epoch,
            r.total_loss,
            r.validation_error,
            r.psnr_eval,
            r.lr
        );
    })?;
    let st = &outcome.state;
    let last = st.records.last();
    let final_checkpoint = (st.epoch > 0).then(|| ckpt_dir.join(checkpoint_name(setting, st.epoch)));
    let summary = SettingSummary {
        setting,
        epochs: st.epoch,
        global_step: st.global_step,
        steps_per_epoch: outcome.steps_per_epoch,
        reference_step_budget: REFERENCE_STEP_BUDGET,
        initial_psnr: st.initial_psnr,
        final_psnr: last.map_or(st.initial_psnr, |r| r.psnr_eval),
        final_lr: st.current_lr,
        lr_drops: st.scheduler.drops,
        sparsity: sparsity_report(&outcome.params, SPARSITY_EPSILON),
        final_checkpoint,
        seconds: start.elapsed().as_secs_f64(),
        records: st.records.clone(),
    };
    write_json(&out.join(format!("{setting}_summary.json")), &summary)?;
    Ok(summary)
}

fn run_settings<T: Scalar>(
    cfg: &RunConfig,
    settings: &[NormSetting],
    manifests: &Manifests,
    out: &Path,
    resume: &Resume,
    parallel: bool,
) -> Result<Vec<SettingSummary>, CliError> {
    let data = load_train_data::<T>(manifests, cfg)?;
    log::info!(
        "{} training patches, {} validation patches, {} evaluation images",
        data.train.len(),
        data.validation.len(),
        data.eval.len()
    );
    if parallel {
        std::thread::scope(|s| {
            let handles: Vec<_> = settings
                .iter()
                .map(|&setting| {
                    let data = &data;
                    s.spawn(move || run_setting(cfg, setting, data, out, resume))
                })
                .collect();
            handles.into_iter().map(|h| h.join().expect("training thread panicked")).collect()
        })
    } else {
        settings.iter().map(|&s| run_setting(cfg, s, &data, out, resume)).collect()
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct ExperimentReport {
    pub settings: Vec<SettingSummary>,
    pub landscape_csv: PathBuf,
    pub svgs: Vec<PathBuf>,
    pub stage_report: StageReport,
}

/// Trains every listed setting on the same data and seed, then writes the
/// combined landscape CSV, charts and stage report under `out`.
pub fn experiment(
    cfg: &RunConfig,
    settings: &[NormSetting],
    out: &Path,
    resume: &Resume,
    parallel: bool,
) -> Result<ExperimentReport, CliError> {
    if settings.is_empty() {
        return Err(CliError::Usage("no settings selected".into()));
    }
    if matches!(resume, Resume::From(_)) && settings.len() > 1 {
        return Err(CliError::Usage("a single checkpoint can only resume a single setting".into()));
    }
    cfg.write_resolved(out)?;
    let manifests = resolve_manifests(cfg, out)?;
    let summaries = match cfg.train.precision {
        Precision::F32 => run_settings::<f32>(cfg, settings, &manifests, out, resume, parallel)?,
        Precision::F64 => run_settings::<f64>(cfg, settings, &manifests, out, resume, parallel)?,
    };
    let records: Vec<LandscapeRecord> = summaries.iter().flat_map(|s| s.records.iter().cloned()).collect();
    let (files, stage_report) = emit_landscape(&records, out)?;
    let report = ExperimentReport {
        settings: summaries,
        landscape_csv: files.csv,
        svgs: files.svgs,
        stage_report,
    };
    write_json(&out.join("experiment_report.json"), &report)?;
    Ok(report)
}

// ---------------------------------------------------------------------------
// gradcheck / param-count / eval
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize)]
pub struct GradCheckSummary {
    pub passed: bool,
    pub tol: f64,
    pub patch: usize,
    pub checks: Vec<normscape_core::gradcheck::ModelCheck>,
}

pub fn gradcheck(model: &ModelConfig, objective: &normscape_core::ObjectiveConfig, patch: usize, seed: u64, tol: f64) -> Result<GradCheckSummary, CliError> {
    let checks = NormSetting::ALL
        .iter()
        .map(|&s| check_model(model, s, objective, patch, seed, tol))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(GradCheckSummary {
        passed: checks.iter().all(|c| c.passed()),
        tol,
        patch,
        checks,
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct ParamCountReport {
    pub total: usize,
    pub enet: usize,
    pub inet: usize,
    pub rnet: usize,
    pub per_layer: Vec<(String, usize)>,
    pub reference_total: usize,
    pub delta_vs_reference: i64,
    pub threshold: usize,
    pub exceeds_threshold: bool,
}

pub fn param_count(model: &ModelConfig) -> ParamCountReport {
    let c = count_params_for(model);
    ParamCountReport {
        total: c.total,
        enet: c.enet,
        inet: c.inet,
        rnet: c.rnet,
        per_layer: c.per_layer,
        reference_total: REFERENCE_PARAM_COUNT,
        delta_vs_reference: c.total as i64 - REFERENCE_PARAM_COUNT as i64,
        threshold: OVERPARAMETRIZATION_THRESHOLD,
        exceeds_threshold: c.total > OVERPARAMETRIZATION_THRESHOLD,
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct EvalSummary {
    pub mode: String,
    pub scale: usize,
    pub images: usize,
    pub mean_psnr: f64,
    pub per_image: Vec<(String, f64)>,
    pub seconds: f64,
}

/// Where evaluation images come from.
#[derive(Debug, Clone)]
pub enum EvalSource {
    Dir(PathBuf),
    Manifest(PathBuf),
}

pub fn load_eval_pairs(source: &EvalSource, scale: usize) -> Result<Vec<ImagePair>, CliError> {
    let manifest = match source {
        EvalSource::Dir(dir) => {
            let images = list_images(dir)?;
            DatasetManifest::from_paths(Role::Eval, scale, &images)?
        }
        EvalSource::Manifest(path) => {
            let m = DatasetManifest::load(path)?;
            m.verify()?;
            m
        }
    };
    Ok(load_pairs(&manifest)?)
}

/// Bicubic baseline when `checkpoint` is `None`, otherwise the trained model.
pub fn eval(source: &EvalSource, scale: usize, checkpoint: Option<&Path>) -> Result<EvalSummary, CliError> {
    let start = Instant::now();
    let pairs = load_eval_pairs(source, scale)?;
    let opts = PsnrOptions::for_scale(scale);
    let (mode, report) = match checkpoint {
        None => ("bicubic".to_string(), evaluate_baseline(&pairs, opts)?),
        Some(path) => {
            let manifest = read_manifest(path)?;
            if manifest.model.scale_factor != scale {
                return Err(CliError::Usage(format!(
                    "{} was trained for ×{}, not ×{scale}",
                    path.display(),
                    manifest.model.scale_factor
                )));
            }
            let wide = manifest.layers.iter().any(|l| l.dtype == "f64");
            let report = if wide {
                let (params, _) = normscape_core::checkpoint::load_checkpoint::<f64>(path)?;
                evaluate_model(&params, &pairs, opts)?
            } else {
                let (params, _) = normscape_core::checkpoint::load_checkpoint::<f32>(path)?;
                evaluate_model(&params, &pairs, opts)?
            };
            (format!("checkpoint {}", path.display()), report)
        }
    };
    Ok(EvalSummary {
        mode,
        scale,
        images: pairs.len(),
        mean_psnr: report.mean_psnr,
        per_image: report.per_image,
        seconds: start.elapsed().as_secs_f64(),
    })
}
