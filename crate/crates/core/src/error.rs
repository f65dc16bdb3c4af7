//! Crate-wide error type.

/// Errors surfaced by the library. Binaries map these to exit code 1;
/// configuration/CLI problems are reported before any work starts and map
/// to exit code 2.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// An operation was recorded with operands whose shapes are
    /// incompatible. The message always contains both shapes.
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    /// Tape misuse (backward twice without reset, non-scalar root, ...).
    #[error("autodiff: {0}")]
    Tape(String),

    /// A forward pass or loss produced a non-finite value.
    #[error("non-finite value in {context}")]
    NonFinite { context: String },

    /// Numerically degenerate input where a direction or alignment is
    /// required (collinear joints, zero spread).
    #[error("degenerate input: {0}")]
    Degenerate(String),

    /// Configuration file / override problems.
    #[error("config: {0}")]
    Config(String),

    /// Dataset or checkpoint container violations (bad magic, version,
    /// truncated payload, checksum mismatch).
    #[error("format error in {path}: {detail}")]
    Format { path: String, detail: String },

    /// Checkpoint is structurally valid but does not match the model it
    /// is being loaded into.
    #[error("checkpoint mismatch: {0}")]
    CheckpointMismatch(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
