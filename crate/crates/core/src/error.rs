use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// An operation was called with arguments that break its shape or value contract.
    #[error("contract violation in {op}: {detail}")]
    Contract { op: &'static str, detail: String },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("{0}: empty set")]
    EmptySet(&'static str),

    #[error("degenerate mesh: {0}")]
    DegenerateMesh(String),

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("parse error at byte {offset}: {detail}")]
    Parse { offset: u64, detail: String },

    #[error("magic mismatch at byte 0: expected {expected:?}, found {found:?}")]
    BadMagic { expected: [u8; 4], found: [u8; 4] },

    #[error("unsupported version {found} at byte 4 (expected {expected})")]
    BadVersion { expected: u8, found: u8 },

    #[error("truncated payload at byte {offset}: needed {needed} more bytes")]
    Truncated { offset: u64, needed: u64 },

    #[error("checkpoint mismatch: {0}")]
    Checkpoint(String),

    #[error("training diverged at iteration {iteration}: total loss {total} exceeded 10x the initial {initial} for {steps} consecutive steps")]
    Divergence { iteration: u64, total: f64, initial: f64, steps: u32 },

    #[error("json error in {path}: line {line}, column {column}: {detail}")]
    Json { path: PathBuf, line: usize, column: usize, detail: String },

    #[error("image error: {0}")]
    Image(#[from] image::ImageError),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn contract(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Contract { op, detail: detail.into() }
    }
}
