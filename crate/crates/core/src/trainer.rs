//! Mini-batch SGD with a plateau learning-rate schedule, per-epoch landscape
//! records and resumable checkpoints.

use std::fs::{self, File};
use std::io::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::checkpoint::{load_checkpoint, save_checkpoint, CheckpointError};
use crate::data::{self, DataError, ImagePair, PatchSet};
use crate::landscape::{evaluate_model, stage_of, LandscapeError, LandscapeRecord, PsnrOptions};
use crate::model::{forward, ModelError, ModelParams};
use crate::objective::{empirical_error, total_loss_and_grads, NormSetting, ObjectiveConfig, ObjectiveError};
use crate::tensor::{Scalar, Tensor, TensorError};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    Config(String),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Objective(#[from] ObjectiveError),
    #[error(transparent)]
    Landscape(#[from] LandscapeError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("non-finite loss at epoch {epoch}, step {step} (batch patches {batch:?}); last checkpoint: {last_checkpoint:?}")]
    NonFinite {
        epoch: usize,
        step: usize,
        batch: Vec<usize>,
        last_checkpoint: Option<PathBuf>,
    },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    F32,
    F64,
}

/// How the intermediate-output weight α evolves over training.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum AlphaSchedule {
    /// Use the objective's `alpha` for every epoch.
    Constant,
    /// Linear from `start` at epoch 1 to `end` at the last epoch.
    LinearDecay { start: f64, end: f64 },
}

impl AlphaSchedule {
    pub fn alpha_at(&self, base: f64, epoch: usize, epochs: usize) -> f64 {
        match *self {
            AlphaSchedule::Constant => base,
            AlphaSchedule::LinearDecay { start, end } => {
                if epochs <= 1 {
                    start
                } else {
                    start + (end - start) * (epoch - 1) as f64 / (epochs - 1) as f64
                }
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr_initial: f64,
    pub lr_decay_factor: f64,
    pub plateau_epochs: usize,
    pub batch_size: usize,
    pub alpha_schedule: AlphaSchedule,
    pub setting: NormSetting,
    pub seed: u64,
    pub checkpoint_every: usize,
    pub precision: Precision,
    /// Rescale the gradient to at most this global L2 norm.
    pub clip_norm: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 45,
            lr_initial: 0.01,
            lr_decay_factor: 10.0,
            plateau_epochs: 5,
            batch_size: data::DEFAULT_BATCH_SIZE,
            alpha_schedule: AlphaSchedule::Constant,
            setting: NormSetting::AllL2,
            seed: 2018,
            checkpoint_every: 1,
            precision: Precision::F32,
            clip_norm: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let fail = |m: &str| Err(TrainError::Config(m.to_string()));
        if !(self.lr_initial >= 0.0 && self.lr_initial.is_finite()) {
            return fail("lr_initial must be finite and non-negative");
        }
        if self.lr_decay_factor.is_nan() || self.lr_decay_factor < 1.0 {
            return fail("lr_decay_factor must be at least 1");
        }
        if self.plateau_epochs == 0 {
            return fail("plateau_epochs must be at least 1");
        }
        if self.epochs == 0 {
            return fail("epochs must be at least 1");
        }
        if self.batch_size == 0 {
            return fail("batch_size must be at least 1");
        }
        if self.checkpoint_every == 0 {
            return fail("checkpoint_every must be at least 1");
        }
        if let Some(c) = self.clip_norm {
            if c.is_nan() || c <= 0.0 {
                return fail("clip_norm must be positive");
            }
        }
        if let AlphaSchedule::LinearDecay { start, end } = self.alpha_schedule {
            if !(0.0..=1.0).contains(&start) || !(0.0..=1.0).contains(&end) {
                return fail("alpha schedule endpoints must lie in [0, 1]");
            }
        }
        Ok(())
    }
}

/// Divides the learning rate when the best validation error has not strictly
/// improved for `patience` consecutive epochs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlateauScheduler {
    pub patience: usize,
    pub best: Option<f64>,
    pub stale: usize,
    pub drops: u32,
}

impl PlateauScheduler {
    pub fn new(patience: usize) -> Self {
        PlateauScheduler {
            patience,
            best: None,
            stale: 0,
            drops: 0,
        }
    }

    /// Feeds one epoch's validation error; returns true when the rate drops.
    pub fn observe(&mut self, error: f64) -> bool {
        match self.best {
            Some(b) if error >= b => {
                self.stale += 1;
                if self.stale >= self.patience {
                    self.stale = 0;
                    self.drops += 1;
                    return true;
                }
                false
            }
            _ => {
                self.best = Some(error);
                self.stale = 0;
                false
            }
        }
    }

    pub fn lr(&self, initial: f64, factor: f64) -> f64 {
        initial / factor.powi(self.drops as i32)
    }
}

/// `w ← w − lr·g` for every weight tensor.
pub fn sgd_step<T: Scalar>(params: &mut ModelParams<T>, grads: &[Tensor<T>], lr: f64) -> Result<(), TensorError> {
    if grads.len() != params.layers.len() {
        return Err(TensorError::LengthMismatch {
            shape: vec![params.layers.len()],
            expected: params.layers.len(),
            actual: grads.len(),
        });
    }
    for (l, g) in params.layers.iter().zip(grads) {
        l.weight.expect_same_shape("sgd_step", g)?;
    }
    let step = T::from_f64_lossy(-lr);
    for (l, g) in params.layers.iter_mut().zip(grads) {
        l.weight.axpy(step, g)?;
    }
    Ok(())
}

fn clip_global_norm<T: Scalar>(grads: &mut [Tensor<T>], max_norm: f64) {
    let norm = grads.iter().map(|g| g.sum_sq().as_f64()).sum::<f64>().sqrt();
    if norm > max_norm {
        let k = T::from_f64_lossy(max_norm / norm);
        for g in grads {
            for v in g.data_mut() {
                *v = *v * k;
            }
        }
    }
}

/// Progress saved into checkpoints so a run can resume exactly.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainState {
    /// Completed epochs.
    pub epoch: usize,
    pub global_step: usize,
    pub current_lr: f64,
    pub scheduler: PlateauScheduler,
    pub initial_psnr: f64,
    pub records: Vec<LandscapeRecord>,
    /// Batch order is derived from `(seed, epoch)`, so the seed is the whole RNG state.
    pub seed: u64,
}

pub struct TrainData<T> {
    pub train: PatchSet<T>,
    pub validation: PatchSet<T>,
    pub eval: Vec<ImagePair>,
    pub psnr: PsnrOptions,
}

#[derive(Debug, Clone, Default)]
pub struct TrainOptions {
    /// Where `{setting}_{epoch}.ckpt` files and the JSON run log go.
    pub checkpoint_dir: Option<PathBuf>,
    /// Stop after this epoch even if the budget is larger.
    pub stop_after: Option<usize>,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome<T> {
    pub params: ModelParams<T>,
    pub state: TrainState,
    pub steps_per_epoch: usize,
}

/// Mean empirical error over a whole patch set, evaluated in chunks.
pub fn validation_error<T: Scalar>(params: &ModelParams<T>, set: &PatchSet<T>, chunk: usize) -> Result<f64, TrainError> {
    let mut weighted = 0.0;
    let idx: Vec<usize> = (0..set.len()).collect();
    for c in idx.chunks(chunk.max(1)) {
        let (x, y) = set.gather(c);
        let out = forward(params, &x).map_err(ObjectiveError::from)?;
        weighted += empirical_error(&y, &out.y_learned)? * c.len() as f64;
    }
    Ok(weighted / set.len() as f64)
}

pub fn checkpoint_name(setting: NormSetting, epoch: usize) -> String {
    format!("{setting}_{epoch}.ckpt")
}

pub fn run_log_name(setting: NormSetting) -> String {
    format!("{setting}_log.jsonl")
}

/// Loads a checkpoint written by [`train`] and the progress stored with it.
pub fn load_resume<T: Scalar>(path: &Path) -> Result<(ModelParams<T>, TrainState), TrainError> {
    let (params, state) = load_checkpoint::<T>(path)?;
    let state = state.ok_or_else(|| TrainError::Config(format!("{} holds no training state", path.display())))?;
    let state: TrainState = serde_json::from_value(state)
        .map_err(|e| TrainError::Config(format!("{}: bad training state: {e}", path.display())))?;
    Ok((params, state))
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> TrainError + '_ {
    move |source| TrainError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Trains `params` under `cfg`, resuming from `resume` when given.
pub fn train<T: Scalar>(
    cfg: &TrainConfig,
    objective: &ObjectiveConfig,
    data: &TrainData<T>,
    mut params: ModelParams<T>,
    resume: Option<TrainState>,
    opts: &TrainOptions,
    mut on_record: impl FnMut(&LandscapeRecord),
) -> Result<TrainOutcome<T>, TrainError> {
    cfg.validate()?;
    objective.validate().map_err(TrainError::Config)?;
    let steps_per_epoch = data::steps_per_epoch(data.train.len(), cfg.batch_size);
    if steps_per_epoch == 0 {
        return Err(DataError::TooFewPatches {
            patches: data.train.len(),
            batch_size: cfg.batch_size,
        }
        .into());
    }
    let mut state = match resume {
        Some(s) => s,
        None => TrainState {
            epoch: 0,
            global_step: 0,
            current_lr: cfg.lr_initial,
            scheduler: PlateauScheduler::new(cfg.plateau_epochs),
            initial_psnr: evaluate_model(&params, &data.eval, data.psnr)?.mean_psnr,
            records: Vec::new(),
            seed: cfg.seed,
        },
    };

    let mut log = match &opts.checkpoint_dir {
        Some(dir) => {
            fs::create_dir_all(dir).map_err(io_err(dir))?;
            let path = dir.join(run_log_name(cfg.setting));
            let mut f = File::create(&path).map_err(io_err(&path))?;
            for r in &state.records {
                writeln!(f, "{}", serde_json::to_string(r).expect("record serializes")).map_err(io_err(&path))?;
            }
            Some((f, path))
        }
        None => None,
    };
    let mut last_checkpoint: Option<PathBuf> = None;
    let last_epoch = opts.stop_after.map_or(cfg.epochs, |s| s.min(cfg.epochs));

    for epoch in state.epoch + 1..=last_epoch {
        let alpha = cfg.alpha_schedule.alpha_at(objective.alpha, epoch, cfg.epochs);
        let obj = ObjectiveConfig { alpha, ..objective.clone() };
        let lr = state.current_lr;
        let mut sums = [0.0f64; 4];
        let order = data::batches(data.train.len(), cfg.batch_size, epoch, state.seed)?;
        for (step, batch) in order.iter().enumerate() {
            let (x, y) = data.train.gather(batch);
            let (loss, mut grads) = match total_loss_and_grads(&params, &x, &y, cfg.setting, &obj) {
                Ok(v) => v,
                Err(e @ (ObjectiveError::NonFinite { .. } | ObjectiveError::Model(ModelError::Tensor(TensorError::NonFinite { .. })))) => {
                    let err = TrainError::NonFinite {
                        epoch,
                        step,
                        batch: batch.clone(),
                        last_checkpoint: last_checkpoint.clone(),
                    };
                    if let Some(dir) = &opts.checkpoint_dir {
                        let path = dir.join(format!("{}_abort.json", cfg.setting));
                        let report = serde_json::json!({
                            "epoch": epoch,
                            "step": step,
                            "batch": batch,
                            "last_checkpoint": last_checkpoint,
                            "error": e.to_string(),
                        });
                        fs::write(&path, report.to_string()).map_err(io_err(&path))?;
                    }
                    return Err(err);
                }
                Err(e) => return Err(e.into()),
            };
            if let Some(c) = cfg.clip_norm {
                clip_global_norm(&mut grads, c);
            }
            sgd_step(&mut params, &grads, lr)?;
            state.global_step += 1;
            for (s, v) in sums.iter_mut().zip([loss.l1_term, loss.l2_term, loss.l3_term, loss.total]) {
                *s += v;
            }
        }
        let steps = order.len() as f64;
        let validation_error = validation_error(&params, &data.validation, cfg.batch_size)?;
        let psnr_eval = evaluate_model(&params, &data.eval, data.psnr)?.mean_psnr;
        let record = LandscapeRecord {
            setting: cfg.setting,
            epoch,
            global_step: state.global_step,
            lr,
            alpha,
            l1_term: sums[0] / steps,
            l2_term: sums[1] / steps,
            l3_term: sums[2] / steps,
            total_loss: sums[3] / steps,
            validation_error,
            psnr_eval,
            stage: stage_of(epoch),
        };
        if state.scheduler.observe(validation_error) {
            log::info!("{}: validation plateau after epoch {epoch}, lowering lr", cfg.setting);
        }
        state.current_lr = state.scheduler.lr(cfg.lr_initial, cfg.lr_decay_factor);
        state.epoch = epoch;
        state.records.push(record.clone());
        on_record(&record);
        if let Some((f, path)) = log.as_mut() {
            writeln!(f, "{}", serde_json::to_string(&record).expect("record serializes")).map_err(io_err(path))?;
        }
        if let Some(dir) = &opts.checkpoint_dir {
            if epoch % cfg.checkpoint_every == 0 || epoch == cfg.epochs || epoch == last_epoch {
                let path = dir.join(checkpoint_name(cfg.setting, epoch));
                let st = serde_json::to_value(&state).expect("state serializes");
                save_checkpoint(&path, &params, Some(st))?;
                last_checkpoint = Some(path);
            }
        }
    }
    Ok(TrainOutcome {
        params,
        state,
        steps_per_epoch,
    })
}
