//! Crate-wide error type.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// A caller broke an operation's contract (shape mismatch, bad argument,
    /// out-of-range id, frozen-parameter misuse, ...).
    #[error("contract violation: {0}")]
    Contract(String),

    /// Non-finite values where finite ones are required.
    #[error("numeric error: {0}")]
    Numeric(String),

    /// A sequence exceeded the model's position budget.
    #[error("overlength sequence: {0}")]
    Overlength(String),

    /// Malformed dataset record.
    #[error("{0}")]
    Data(String),

    /// Checkpoint file does not start with the expected magic bytes.
    #[error("bad magic: {0}")]
    BadMagic(String),

    /// Checkpoint format version is not supported.
    #[error("version mismatch: found {found}, supported {supported}")]
    VersionMismatch { found: u32, supported: u32 },

    /// Checkpoint data section ended early or an entry points outside it.
    #[error("truncated checkpoint: {0}")]
    Truncated(String),

    /// A checkpoint is missing tensors required by the requested role.
    #[error("missing tensors: {}", .0.join(", "))]
    MissingTensors(Vec<String>),

    /// Training loss became non-finite.
    #[error("training diverged: {0}")]
    Diverged(String),

    #[error("config error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
