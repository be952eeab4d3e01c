use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: shape mismatch between {left:?} and {right:?}")]
    Shape {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },

    #[error("{op}: index {index} out of range for bound {bound}")]
    Index {
        op: &'static str,
        index: usize,
        bound: usize,
    },

    #[error("backward requires a scalar loss, got shape {0:?}")]
    NotScalar(Vec<usize>),

    #[error("non-finite value encountered in {0}")]
    NonFinite(String),

    #[error("invalid config field `{field}`: {reason}")]
    Config { field: String, reason: String },

    #[error(
        "infeasible CTC target: {frames} frames cannot emit {target_len} labels (need {required})"
    )]
    InfeasibleTarget {
        frames: usize,
        target_len: usize,
        required: usize,
    },

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("training diverged at step {step}: {term} is not finite")]
    Diverged { step: usize, term: &'static str },

    #[error("bad magic in {what}: expected {expected:?}, found {found:?}")]
    BadMagic {
        what: String,
        expected: [u8; 4],
        found: [u8; 4],
    },

    #[error("unsupported {what} format version {version}")]
    UnsupportedVersion { what: String, version: u32 },

    #[error("truncated {0}")]
    Truncated(String),

    #[error("corpus integrity failure for utterance `{id}`: {reason}")]
    Integrity { id: String, reason: String },

    #[error("malformed manifest line {line}: {reason}")]
    Manifest { line: usize, reason: String },

    #[error("out-of-vocabulary characters: {0:?}")]
    Vocabulary(Vec<char>),

    #[error("checkpoint does not match model: {0}")]
    CheckpointMismatch(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn shape(op: &'static str, left: &[usize], right: &[usize]) -> Self {
        Error::Shape {
            op,
            left: left.to_vec(),
            right: right.to_vec(),
        }
    }

    pub(crate) fn config(field: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::Config {
            field: field.into(),
            reason: reason.into(),
        }
    }
}
