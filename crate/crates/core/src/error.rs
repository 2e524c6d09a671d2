use std::path::PathBuf;

use crate::graph::{NodeId, ValidationReport};

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid graph: {0}")]
    InvalidGraph(ValidationReport),

    #[error("graph must be lowered first: node {0} is {1}")]
    NotLowered(NodeId, &'static str),

    #[error("no relaxation supplied for ReLU node {0}")]
    MissingRelaxation(NodeId),

    #[error("node {0} is not reachable from the input")]
    Unreachable(NodeId),

    #[error("linear form still references node {0}; frontier not reduced to the input")]
    FrontierNotReduced(NodeId),

    #[error("index {index} out of range (dimension {len})")]
    IndexOutOfRange { index: usize, len: usize },

    #[error("unsupported padding mode `{0}`")]
    UnsupportedPadding(String),

    #[error("expected a scalar output, found {0} outputs")]
    NonScalarOutput(usize),

    #[error("invalid interval at neuron {index}: lo {lo} > hi {hi}")]
    InvertedInterval { index: usize, lo: f64, hi: f64 },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("model format error: {0}")]
    Format(String),

    #[error("unsupported format version `{0}`")]
    Version(String),

    #[error("checksum mismatch for {path}")]
    Checksum { path: PathBuf },

    #[error("{path}: expected {expected} bytes, found {found}")]
    ByteLength {
        path: PathBuf,
        expected: usize,
        found: usize,
    },

    #[error("bad IDX magic {found:#010x} in {path} (expected {expected:#010x})")]
    IdxMagic {
        path: PathBuf,
        expected: u32,
        found: u32,
    },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

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
}
