use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Errors produced by the simulator.
///
/// Variants are grouped by the kind of failure so that front-ends can map
/// them onto distinct exit codes (see [`Error::kind`]).
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in layer `{layer}`: expected {expected:?}, got {actual:?}")]
    Shape {
        layer: String,
        expected: Vec<usize>,
        actual: Vec<usize>,
    },

    #[error("invalid tensor: {0}")]
    Tensor(String),

    #[error("label {label} of sample {index} is out of range for {num_classes} classes")]
    LabelOutOfRange {
        index: usize,
        label: usize,
        num_classes: usize,
    },

    #[error("weight layout mismatch: {0}")]
    Layout(String),

    #[error("length mismatch: expected {expected} values, got {actual}")]
    Length { expected: usize, actual: usize },

    #[error("invalid model spec: {0}")]
    Spec(String),

    #[error("client `{0}` has no samples")]
    EmptyDataset(String),

    #[error("no client updates to aggregate")]
    NoUpdates,

    #[error("no clients to train on")]
    NoClients,

    #[error("no cluster models to assign to")]
    NoClusters,

    #[error("test queue is empty")]
    EmptyQueue,

    #[error("HAM-D score {0} outside [0, 50]")]
    HamdOutOfRange(i64),

    #[error("invalid record: {0}")]
    Record(String),

    #[error("csv error at row {row}{}: {message}", column.map(|c| format!(", column {c}")).unwrap_or_default())]
    Csv {
        row: usize,
        column: Option<usize>,
        message: String,
    },

    #[error("malformed checkpoint: {0}")]
    Checkpoint(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("cannot access {path}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

/// Coarse classification of an [`Error`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorKind {
    /// Bad configuration or parameters supplied by the user.
    Config,
    /// Malformed or missing input data.
    Data,
    /// Anything that went wrong while running an experiment.
    Runtime,
}

impl Error {
    pub fn kind(&self) -> ErrorKind {
        match self {
            Error::Config(_) | Error::Spec(_) => ErrorKind::Config,
            Error::HamdOutOfRange(_)
            | Error::Record(_)
            | Error::Csv { .. }
            | Error::EmptyDataset(_)
            | Error::NoClients
            | Error::EmptyQueue
            | Error::Io { .. } => ErrorKind::Data,
            _ => ErrorKind::Runtime,
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
