use std::path::Path;

use normscape_core::checkpoint::CheckpointError;
use normscape_core::data::DataError;
use normscape_core::gradcheck::ModelCheckError;
use normscape_core::landscape::LandscapeError;
use normscape_core::model::ModelError;
use normscape_core::objective::ObjectiveError;
use normscape_core::trainer::TrainError;
use normscape_core::TensorError;
use thiserror::Error;

/// Failures grouped by the exit code they map to.
#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Data(String),
    #[error("{0}")]
    Numeric(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Data(_) => 2,
            CliError::Numeric(_) => 3,
        }
    }

    pub fn io(path: &Path, e: std::io::Error) -> Self {
        CliError::Data(format!("{}: {e}", path.display()))
    }
}

impl From<DataError> for CliError {
    fn from(e: DataError) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<CheckpointError> for CliError {
    fn from(e: CheckpointError) -> Self {
        CliError::Data(e.to_string())
    }
}

fn tensor_error(e: &TensorError) -> bool {
    matches!(e, TensorError::NonFinite { .. })
}

impl From<ModelError> for CliError {
    fn from(e: ModelError) -> Self {
        match &e {
            ModelError::Tensor(t) if tensor_error(t) => CliError::Numeric(e.to_string()),
            ModelError::Config(_) => CliError::Usage(e.to_string()),
            _ => CliError::Data(e.to_string()),
        }
    }
}

impl From<ObjectiveError> for CliError {
    fn from(e: ObjectiveError) -> Self {
        match e {
            ObjectiveError::Model(m) => m.into(),
            ObjectiveError::NonFinite { .. } => CliError::Numeric(e.to_string()),
            ObjectiveError::Tensor(ref t) if tensor_error(t) => CliError::Numeric(e.to_string()),
            _ => CliError::Data(e.to_string()),
        }
    }
}

impl From<LandscapeError> for CliError {
    fn from(e: LandscapeError) -> Self {
        match e {
            LandscapeError::Model(m) => m.into(),
            other => CliError::Data(other.to_string()),
        }
    }
}

impl From<ModelCheckError> for CliError {
    fn from(e: ModelCheckError) -> Self {
        match e {
            ModelCheckError::Model(m) => m.into(),
            ModelCheckError::Objective(o) => o.into(),
            other => CliError::Numeric(other.to_string()),
        }
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::Config(m) => CliError::Usage(m),
            TrainError::Data(d) => d.into(),
            TrainError::Objective(o) => o.into(),
            TrainError::Landscape(l) => l.into(),
            TrainError::Checkpoint(c) => c.into(),
            TrainError::Tensor(t) if tensor_error(&t) => CliError::Numeric(t.to_string()),
            e @ TrainError::NonFinite { .. } => CliError::Numeric(e.to_string()),
            other => CliError::Data(other.to_string()),
        }
    }
}
