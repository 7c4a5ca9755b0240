use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed `{chunk}` chunk: {message}")]
    WavParse { chunk: String, message: String },

    #[error("unsupported audio format: {0}")]
    UnsupportedFormat(String),

    #[error("manifest line {line}: {message}")]
    Manifest { line: usize, message: String },

    #[error("{0}")]
    Config(String),

    #[error("shape mismatch in {context}: expected {expected}, got {actual}")]
    Shape {
        context: String,
        expected: String,
        actual: String,
    },

    #[error("out of bounds: {0}")]
    Bounds(String),

    #[error("degenerate input: {0}")]
    Degenerate(String),

    /// A clip is shorter than one segment; callers filter such clips out.
    #[error("clip `{id}` has {len} samples, fewer than one {needed}-sample segment")]
    ClipTooShort { id: String, len: usize, needed: usize },

    #[error("corpus too small: batch needs {needed} eligible clips, corpus has {available}")]
    CorpusTooSmall { needed: usize, available: usize },

    #[error("{0}")]
    Training(String),

    #[error("checkpoint invalid at byte {offset}: {message}")]
    Checkpoint { offset: u64, message: String },

    #[error("checkpoint version mismatch: file is version {found}, this build reads version {expected}")]
    VersionMismatch { found: u32, expected: u32 },

    #[error("{0}")]
    Metric(String),

    #[error("{0}")]
    Synth(String),
}

impl Error {
    pub(crate) fn shape(
        context: impl Into<String>,
        expected: impl std::fmt::Debug,
        actual: impl std::fmt::Debug,
    ) -> Self {
        Error::Shape {
            context: context.into(),
            expected: format!("{expected:?}"),
            actual: format!("{actual:?}"),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Short module-qualified category for one-line CLI failure reports.
    pub fn category(&self) -> &'static str {
        match self {
            Error::Io { .. } => "io",
            Error::WavParse { .. } | Error::UnsupportedFormat(_) => "audio",
            Error::Manifest { .. } => "manifest",
            Error::Config(_) => "config",
            Error::Shape { .. } | Error::Bounds(_) | Error::Degenerate(_) => "numerics",
            Error::ClipTooShort { .. } | Error::CorpusTooSmall { .. } => "contrastive",
            Error::Training(_) => "trainer",
            Error::Checkpoint { .. } | Error::VersionMismatch { .. } => "checkpoint",
            Error::Metric(_) => "eval",
            Error::Synth(_) => "synth",
        }
    }
}
