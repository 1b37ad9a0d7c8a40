use thiserror::Error;

/// Errors surfaced by the library. Checkpoint decoding failures are kept as
/// distinct variants so callers can tell a corrupted file from a stale one.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("invalid argument: {0}")]
    InvalidArg(String),
    #[error("caption outside the controlled vocabulary: {0}")]
    Vocab(String),
    #[error("parse error: {0}")]
    Parse(String),
    #[error("numerical failure: {0}")]
    Numerical(String),
    #[error("checkpoint: bad magic")]
    BadMagic,
    #[error("checkpoint: unsupported format version {0}")]
    VersionMismatch(u32),
    #[error("checkpoint: truncated record")]
    Truncated,
    #[error("training diverged at step {step} (loss {loss})")]
    Diverged { step: usize, loss: f64 },
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
