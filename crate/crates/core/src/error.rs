use std::io;
use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },

    #[error("stream error: {0}")]
    Stream(#[from] io::Error),

    #[error("vocabulary {origin}: {reason}")]
    Vocab { origin: String, reason: String },

    #[error("invalid input: {0}")]
    Invalid(String),

    #[error("teacher mismatch: example belongs to teacher {example}, got {given}")]
    TeacherMismatch { example: u32, given: u32 },

    #[error("token id {id} out of range for vocabulary of size {size}")]
    IdOutOfRange { id: u32, size: usize },

    #[error("shard format: {0}")]
    Format(String),

    #[error("checksum mismatch: expected {expected:016x}, found {found:016x}")]
    Checksum { expected: u64, found: u64 },

    #[error("unsupported format version {found} (expected {expected})")]
    Version { expected: u16, found: u16 },

    #[error("manifest: {0}")]
    Manifest(String),

    #[error("non-finite loss at step {step}: {detail}")]
    NonFinite { step: u64, detail: String },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::Invalid(msg.into())
    }

    /// Whether the failure means stored artifacts disagree with each other or are
    /// corrupt, as opposed to bad user input.
    pub fn is_integrity(&self) -> bool {
        matches!(self, Error::Format(_) | Error::Checksum { .. } | Error::Version { .. })
    }

    /// Whether the failure is a validation problem in user-supplied inputs.
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            Error::Manifest(_)
                | Error::Invalid(_)
                | Error::Vocab { .. }
                | Error::TeacherMismatch { .. }
                | Error::IdOutOfRange { .. }
        )
    }
}
