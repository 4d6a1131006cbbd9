use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("validation failed: {0}")]
    Validation(String),

    #[error("graph error: {0}")]
    Graph(String),

    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },

    #[error("missing dataset file {}", path.display())]
    MissingFile { path: PathBuf },

    #[error("truncated record in {} at byte offset {offset}", path.display())]
    TruncatedRecord { path: PathBuf, offset: u64 },

    #[error("label byte {label} out of range in {} at byte offset {offset}", path.display())]
    BadLabel {
        path: PathBuf,
        offset: u64,
        label: u8,
    },

    #[error("not a checkpoint file (bad magic {0:02x?})")]
    BadMagic([u8; 4]),

    #[error("checkpoint version {found} is newer than supported version {supported}")]
    UnsupportedVersion { found: u16, supported: u16 },

    #[error("inconsistent checkpoint: {0}")]
    Inconsistent(String),

    #[error("training diverged at step {step}: loss={loss} lr={lr} grad_norm={grad_norm}")]
    Diverged {
        step: usize,
        loss: f64,
        lr: f64,
        grad_norm: f64,
    },

    #[error("cancelled")]
    Cancelled,

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn shape(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        Error::Shape {
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }
}
