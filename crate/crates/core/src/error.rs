use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("condition {got} out of range 1..={max}")]
    ConditionOutOfRange { got: usize, max: usize },

    #[error("timestep {got} out of range 1..={max}")]
    TimestepOutOfRange { got: usize, max: usize },

    #[error(
        "degenerate image: {found} pixel(s) with optical-density l1 mass >= {threshold}, need at least {needed}"
    )]
    DegenerateImage {
        found: usize,
        needed: usize,
        threshold: f64,
    },

    #[error("empty batch")]
    EmptyBatch,

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("matrix square root failed (condition number {condition:e})")]
    MatrixSqrt { condition: f64 },

    #[error("malformed model file: {0}")]
    ModelFormat(String),

    #[error("could not sample a valid stain matrix after {0} attempts")]
    SampleRejected(usize),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{stage} stage failed: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<Error>,
    },

    #[error(transparent)]
    Image(#[from] image::ImageError),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn in_stage(stage: &'static str) -> impl FnOnce(Error) -> Error {
        move |e| Error::Stage {
            stage,
            source: Box::new(e),
        }
    }

    /// True for errors caused by bad user input rather than a failing stage.
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            Error::Shape(_)
                | Error::ConditionOutOfRange { .. }
                | Error::TimestepOutOfRange { .. }
                | Error::InvalidArgument(_)
                | Error::EmptyBatch
        )
    }
}
