use std::path::PathBuf;

use thiserror::Error;

use crate::data::Stage;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("image error on {path}: {message}")]
    Image { path: PathBuf, message: String },

    #[error("malformed manifest at line {line}: {message}")]
    Manifest { line: usize, message: String },

    #[error("annotations for sequence `{sequence_id}` are not strictly increasing in onset")]
    UnsortedAnnotations { sequence_id: String },

    #[error("insufficient records for stage {stage}: need {needed}, have {available}")]
    InsufficientStage {
        stage: Stage,
        needed: usize,
        available: usize,
    },

    #[error("insufficient {source_kind} images for stage {stage}: need {needed}, have {available}")]
    InsufficientPool {
        source_kind: String,
        stage: Stage,
        needed: usize,
        available: usize,
    },

    #[error("sequence `{sequence_id}` has more than one frame for stage {stage}")]
    DuplicateFrame { sequence_id: String, stage: Stage },

    #[error("shape mismatch: expected {expected:?}, got {actual:?}")]
    Shape {
        expected: Vec<usize>,
        actual: Vec<usize>,
    },

    #[error("invalid argument: {0}")]
    Invalid(String),

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("unknown feature extractor `{0}`")]
    UnknownExtractor(String),

    #[error("feature extractor `{id}` is declared but unavailable: {reason}")]
    ExtractorUnavailable { id: String, reason: String },

    #[error("matrix square root failed: {0}")]
    MatrixSqrt(String),

    #[error("pretrained weights not found at {0}")]
    MissingWeights(PathBuf),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("csv error on {path}: {message}")]
    Csv { path: PathBuf, message: String },

    #[error("image `{0}` is not part of the evaluation pool")]
    UnknownImage(String),

    #[error("pool composition violates its quota: {0}")]
    Composition(String),

    #[error("label `{0}` is not one of the five stages")]
    UnknownLabel(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
