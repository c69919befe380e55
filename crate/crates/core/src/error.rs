use std::path::PathBuf;

use thiserror::Error;

use crate::{ClassId, SampleId};

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed CEMB header: {0}")]
    MalformedHeader(String),
    #[error("truncated CEMB payload: expected {expected} bytes, found {found}")]
    TruncatedPayload { expected: u64, found: u64 },
    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("invalid embedding set: {0}")]
    InvalidSet(String),
    #[error("cannot place {requested} class means at the requested separation in dim {dim}; at most {max_classes} classes fit")]
    SeparationInfeasible {
        requested: usize,
        dim: usize,
        max_classes: usize,
    },
    #[error("cannot fit a subspace to zero samples")]
    EmptyFit,
    #[error("no old-class subspaces registered")]
    EmptyRegistry,
    #[error("class {0} predicted by the head has no registered subspace")]
    MissingSubspace(ClassId),
    #[error("threshold calibration needs at least one score")]
    EmptyScores,
    #[error("not a probability vector: {0}")]
    InvalidProbabilities(String),
    #[error("label {0} is not an output of this head")]
    UnknownLabel(ClassId),
    #[error("class {0} already present")]
    DuplicateClass(ClassId),
    #[error("head needs at least one class")]
    NoClasses,
    #[error("nothing to train on: {0}")]
    EmptyTrainingSet(String),
    #[error("unknown sample id {0}")]
    UnknownSample(SampleId),
    #[error("sample {0} already labeled")]
    AlreadyLabeled(SampleId),
    #[error("stream cannot be built: {0}")]
    Stream(String),
    #[error("insufficient holdout at task {task}: need {needed} old samples, {available} available (achievable old:new ratio {achievable:.3})")]
    InsufficientHoldout {
        task: usize,
        needed: usize,
        available: usize,
        achievable: f64,
    },
    #[error("missing evaluation samples for class {0}")]
    MissingEvalSet(ClassId),
    #[error("invalid value for `{key}`: {reason}")]
    Config { key: String, reason: String },
    #[error("config parse error: {0}")]
    ConfigParse(String),
    #[error("{0}")]
    Output(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn config(key: &str, reason: impl Into<String>) -> Self {
        Error::Config {
            key: key.to_string(),
            reason: reason.into(),
        }
    }
}
