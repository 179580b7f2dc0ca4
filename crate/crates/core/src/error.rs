//! Error type shared by the whole crate.

use std::path::PathBuf;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// An image file existed but could not be decoded.
    #[error("could not decode image {path}: {reason}")]
    Decode { path: PathBuf, reason: String },

    /// Plain I/O failure, annotated with the path that was being touched.
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    /// Caller passed something structurally wrong (bad window size, empty
    /// augmentation set, mismatched dims, non-positive temperature, ...).
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// Input image is smaller than the configured patch machinery can handle.
    #[error("image too small: {height}x{width} after preprocessing, need at least {min}x{min}")]
    ImageTooSmall {
        height: usize,
        width: usize,
        min: usize,
    },

    /// A loss turned non-finite during training. The trainer reports which
    /// term blew up and at which epoch; the last good checkpoint is kept.
    #[error("training diverged at epoch {epoch}: non-finite {term}")]
    Divergence { epoch: usize, term: String },

    /// A documented precondition of an evaluation routine was not met.
    #[error("precondition failed: {0}")]
    Precondition(String),

    /// Checkpoint file was written by an incompatible version of this crate.
    #[error("checkpoint version mismatch: file has {found:?}, this build reads {expected:?}")]
    CheckpointVersion { found: String, expected: String },

    /// Checkpoint file is structurally damaged (truncated blob, bad magic,
    /// manifest/payload disagreement).
    #[error("corrupt checkpoint: {0}")]
    CorruptCheckpoint(String),

    /// An external prior provider failed while producing a sample.
    #[error("prior provider failed on sample {index}: {reason}")]
    Provider { index: usize, reason: String },

    /// The out-of-process generator endpoint violated the wire protocol.
    #[error("generator protocol error: {0}")]
    Protocol(String),
}

impl Error {
    /// Convenience for wrapping `std::io::Error` with path context.
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
