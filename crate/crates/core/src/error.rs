use std::io;

use thiserror::Error;

/// Errors produced anywhere in the compression pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("empty context")]
    EmptyContext,

    #[error("window covers entire sequence (sequence length {seq_len}, window {window_len})")]
    WindowCoversSequence { seq_len: usize, window_len: usize },

    #[error("budget below observation window (r*l = {budget}, window {window_len})")]
    BudgetBelowWindow { budget: f64, window_len: usize },

    #[error("requested budget below per-layer minimum (context ratio {context_ratio}, minimum {min_ratio})")]
    BudgetBelowMinimum { context_ratio: f64, min_ratio: f64 },

    #[error("degenerate vector at index {index}: zero norm")]
    DegenerateVector { index: usize },

    #[error("layer {0} is already unfolded")]
    AlreadyUnfolded(usize),

    #[error("score length mismatch: expected {expected}, got {got}")]
    ScoreLength { expected: usize, got: usize },

    #[error("dump lacks query windows for layer {0}; eviction needs them")]
    MissingQueries(usize),

    #[error("bad magic: expected {expected:?}, found {found:?}")]
    BadMagic { expected: [u8; 4], found: [u8; 4] },

    #[error("unsupported format version {found} (expected {expected})")]
    UnsupportedVersion { expected: u16, found: u16 },

    #[error("truncated payload while reading {0}")]
    Truncated(&'static str),

    #[error("count mismatch: {0}")]
    CountMismatch(String),

    #[error("corrupt archive: reference out of range ({reference} >= {len})")]
    RefOutOfRange { reference: u32, len: usize },

    #[error("corrupt archive: {0}")]
    CorruptArchive(String),

    #[error(transparent)]
    Io(#[from] io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn config_err(msg: impl Into<String>) -> Error {
    Error::Config(msg.into())
}
