use std::path::PathBuf;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid spec: {0}")]
    InvalidSpec(String),

    #[error("cannot sample task: class {class} has {available} samples, {required} required")]
    TaskSampling {
        class: u32,
        required: usize,
        available: usize,
    },

    #[error("split has {available} classes, {required} required")]
    NotEnoughClasses { required: usize, available: usize },

    #[error("class {class} has {available} samples, {required} required")]
    InsufficientSamples {
        class: u32,
        required: usize,
        available: usize,
    },

    #[error("{path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("dataset validation failed: {0}")]
    Validation(String),

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("usage error: {0}")]
    Usage(String),

    #[error("learner {learner} does not support {strategy}")]
    UnsupportedStrategy { learner: String, strategy: String },

    #[error("statistics error: {0}")]
    Stats(String),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("episode {episode}: {source}")]
    Episode {
        episode: usize,
        #[source]
        source: Box<Error>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
