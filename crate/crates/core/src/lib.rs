//! Recursive super-resolution network trained under norm-based capacity
//! control, together with the dense tensor kernels, objective, data pipeline,
//! trainer and landscape reporting it needs.
//!
//! Everything numeric is implemented here by hand: convolutions have both an
//! im2col/GEMM path and a naive reference path, and backward passes are
//! composed explicitly for the fixed architecture.

pub mod bicubic;
pub mod checkpoint;
pub mod conv;
pub mod data;
pub mod gradcheck;
pub mod landscape;
pub mod model;
pub mod objective;
pub mod ops;
pub mod svg;
pub mod synthetic;
pub mod tensor;
pub mod trainer;

pub use conv::{conv2d_backward, conv2d_forward, ConvSpec};
pub use data::{DatasetManifest, ManifestEntry, PatchSet, Role};
pub use landscape::{psnr, LandscapeRecord, PsnrOptions};
pub use model::{
    build_model, count_params, forward, sparsity_report, ForwardOutput, ModelConfig, ModelParams,
    ParamCount, SparsityReport, Subnet,
};
pub use objective::{LossBreakdown, NormKind, NormSetting, ObjectiveConfig};
pub use tensor::{Scalar, Tensor, TensorError};
pub use trainer::{AlphaSchedule, Precision, TrainConfig, TrainOutcome, TrainState};

/// Parameter count reported for the reference network.
pub const REFERENCE_PARAM_COUNT: usize = 945_318;

/// Parameter count of the 7-layer predecessor network; the model must exceed it.
pub const OVERPARAMETRIZATION_THRESHOLD: usize = 936_778;

/// Step budget of the reference 45-epoch run.
pub const REFERENCE_STEP_BUDGET: usize = 6601;
