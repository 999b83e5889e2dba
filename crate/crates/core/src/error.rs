use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Every fallible operation in the crate returns this error.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("shape mismatch in layer {layer}: expected {expected}, got {actual}")]
    Shape {
        layer: usize,
        expected: String,
        actual: String,
    },

    #[error("empty dataset: {0}")]
    EmptyData(String),

    #[error("capacity exhausted in layer(s) {layers:?}: {detail}")]
    CapacityExhausted { layers: Vec<usize>, detail: String },

    #[error("bit budget exceeded: {required} bits required, {available} available")]
    BitBudget { required: u8, available: u8 },

    #[error("task {0} is already committed")]
    TaskAlreadyCommitted(u32),

    #[error("unknown task {0}")]
    UnknownTask(u32),

    #[error("commit rejected: slot {slot} of layer {layer} is not eligible ({reason})")]
    IneligibleSlot {
        layer: usize,
        slot: usize,
        reason: String,
    },

    #[error("corrupt data: {0}")]
    Corrupt(String),

    #[error("{path}: IDX parse error at byte offset {offset}: {msg}")]
    Idx {
        path: PathBuf,
        offset: u64,
        msg: String,
    },

    #[error("checkpoint checksum mismatch: stored {stored:#018x}, computed {computed:#018x}")]
    Checksum { stored: u64, computed: u64 },

    #[error("unsupported checkpoint version {found} (this build reads version {supported})")]
    UnsupportedVersion { found: u32, supported: u32 },

    #[error("I/O error on {path}: {source}")]
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

    pub(crate) fn shape(layer: usize, expected: impl ToString, actual: impl ToString) -> Self {
        Error::Shape {
            layer,
            expected: expected.to_string(),
            actual: actual.to_string(),
        }
    }
}
