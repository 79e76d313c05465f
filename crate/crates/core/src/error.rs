use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("lattice is degenerate: |det| = {det:e}")]
    LatticeDegenerate { det: f64 },

    #[error("non-finite coordinate: {0:?}")]
    NonFiniteCoordinate([f64; 3]),

    #[error("atoms {a} and {b} overlap (distance {distance:e} Å)")]
    AtomOverlap { a: usize, b: usize, distance: f64 },

    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("index {index} out of range for {op} (bound {bound})")]
    Index {
        op: &'static str,
        index: usize,
        bound: usize,
    },

    #[error("function is not deterministic: two evaluations at the same point differ ({first} vs {second})")]
    NondeterministicFunction { first: f64, second: f64 },

    #[error("non-finite gradient for parameter `{0}`")]
    NonFiniteGradient(String),

    #[error("{what} = {value} is out of range [{lo}, {hi}]")]
    Range {
        what: &'static str,
        value: f64,
        lo: f64,
        hi: f64,
    },

    #[error("no atom features for element Z = {0}")]
    UnknownElement(u32),

    #[error("frequency set mismatch: expected {expected} frequencies, got {got}")]
    FrequencyMismatch { expected: usize, got: usize },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("split is empty")]
    EmptySplit,

    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("record `{id}` failed validation: {reasons}")]
    Validation { id: String, reasons: String },

    #[error("non-finite loss at step {step} (lr {lr:e}, grad norm {grad_norm:e}); last batch: {batch_ids:?}")]
    NonFiniteLoss {
        step: usize,
        lr: f64,
        grad_norm: f64,
        batch_ids: Vec<String>,
    },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("unknown parameter `{0}`")]
    UnknownParameter(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
