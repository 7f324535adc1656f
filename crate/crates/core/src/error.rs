use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{total} classes cannot be split evenly into {tasks} tasks")]
    IndivisibleClasses { total: usize, tasks: usize },

    #[error("task {task} is outside 1..={num_tasks}")]
    OutOfRangeTask { task: usize, num_tasks: usize },

    #[error("class {0} is already stored in memory")]
    ClassCollision(usize),

    #[error("cannot draw a batch: memory and current task data are both empty")]
    EmptySource,

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("layout mismatch: {0}")]
    LayoutMismatch(String),

    #[error("models differ in architecture or head width")]
    HeterogeneousModels,

    #[error("label {label} is outside the head width {width}")]
    LabelOutOfRange { label: usize, width: usize },

    #[error("empty batch")]
    EmptyBatch,

    #[error("gradient norm below threshold")]
    ZeroGradient,

    #[error("memory holds no exemplars for task {0}")]
    MissingTaskExemplars(usize),

    #[error("invalid configuration: {0}")]
    ConfigInvalid(String),

    #[error("output already exists at {0} (use force to overwrite)")]
    OutputExists(PathBuf),

    #[error("results bundle contains no reports")]
    EmptyBundle,

    #[error("malformed data: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl From<safetensors::SafeTensorError> for Error {
    fn from(e: safetensors::SafeTensorError) -> Self {
        Error::Format(e.to_string())
    }
}
