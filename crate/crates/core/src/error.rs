//! Crate-wide error type.

use std::fmt;
use std::path::{Path, PathBuf};

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug)]
pub enum Error {
    /// Operand shapes are incompatible for an operation.
    Shape { op: &'static str, detail: String },
    /// A non-finite value appeared where finite math is required.
    Numeric { context: String, detail: String },
    /// Gradient-tape misuse: nested tapes, reused tape, bad root, missing tape.
    Tape(String),
    /// Invalid configuration or argument.
    Config(String),
    /// A requested attention block does not exist in the model.
    UnknownBlock { name: String, valid: Vec<String> },
    /// A persisted binary container failed validation.
    Container { path: PathBuf, detail: String },
    /// Manifest contents disagree with stored tensors or the caller's expectation.
    Manifest { path: PathBuf, detail: String },
    /// Underlying I/O failure.
    Io { path: PathBuf, source: std::io::Error },
    /// Reference track has zero variance; correlation against it is undefined.
    StaticReference,
}

impl Error {
    /// Stable one-word category, used for machine-parsable CLI errors.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Shape { .. } => "shape",
            Error::Numeric { .. } => "numeric",
            Error::Tape(_) => "tape",
            Error::Config(_) => "config",
            Error::UnknownBlock { .. } => "block",
            Error::Container { .. } => "container",
            Error::Manifest { .. } => "manifest",
            Error::Io { .. } => "io",
            Error::StaticReference => "static-reference",
        }
    }

    pub fn io(path: impl AsRef<Path>, source: std::io::Error) -> Self {
        Error::Io { path: path.as_ref().to_path_buf(), source }
    }

    pub fn container(path: impl AsRef<Path>, detail: impl Into<String>) -> Self {
        Error::Container { path: path.as_ref().to_path_buf(), detail: detail.into() }
    }

    pub fn manifest(path: impl AsRef<Path>, detail: impl Into<String>) -> Self {
        Error::Manifest { path: path.as_ref().to_path_buf(), detail: detail.into() }
    }
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::Shape { op, detail } => write!(f, "shape error in {op}: {detail}"),
            Error::Numeric { context, detail } => {
                write!(f, "non-finite value in {context}: {detail}")
            }
            Error::Tape(msg) => write!(f, "tape error: {msg}"),
            Error::Config(msg) => write!(f, "config error: {msg}"),
            Error::UnknownBlock { name, valid } => {
                write!(f, "unknown attention block {name:?}; valid blocks: {}", valid.join(", "))
            }
            Error::Container { path, detail } => {
                write!(f, "corrupt container {}: {detail}", path.display())
            }
            Error::Manifest { path, detail } => {
                write!(f, "manifest error {}: {detail}", path.display())
            }
            Error::Io { path, source } => write!(f, "io error on {}: {source}", path.display()),
            Error::StaticReference => {
                write!(f, "reference track has zero variance; use the static-case check instead")
            }
        }
    }
}

impl std::error::Error for Error {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        match self {
            Error::Io { source, .. } => Some(source),
            _ => None,
        }
    }
}
