use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {left:?} vs {right:?}")]
    Dimension {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },

    #[error("{op}: empty batch")]
    EmptyBatch { op: &'static str },

    #[error("{op}: need at least {need} samples, got {got}")]
    InsufficientSamples {
        op: &'static str,
        need: usize,
        got: usize,
    },

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("non-finite objective when probing coordinate {coord} of parameter {param}")]
    Probe { param: usize, coord: usize },

    #[error("KL divergence is infinite: q[{index}] = 0 where p[{index}] > 0")]
    InfiniteDivergence { index: usize },

    #[error("format error at byte {offset}: {reason}")]
    Format { offset: u64, reason: String },

    #[error("unsupported format version {found} (expected {expected})")]
    Version { found: u32, expected: u32 },

    #[error("invalid {field}: {reason}")]
    Validation { field: String, reason: String },

    #[error("cannot stratify: class {class} has {count} example(s), need at least 2")]
    Stratification { class: usize, count: usize },

    #[error("numeric failure at {context}: {reason}")]
    Numeric { context: String, reason: String },

    #[error("config {origin}: {message}")]
    Config { origin: String, message: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Process exit codes.
pub mod exit {
    pub const SUCCESS: i32 = 0;
    /// A verification command found a failure.
    pub const CHECK_FAILED: i32 = 1;
    pub const CONFIG: i32 = 2;
    pub const NUMERIC: i32 = 3;
}

impl Error {
    /// Numeric failures map to [`exit::NUMERIC`]; everything else is a
    /// configuration, input, or usage problem.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Numeric { .. } | Error::Probe { .. } | Error::InfiniteDivergence { .. } => exit::NUMERIC,
            _ => exit::CONFIG,
        }
    }

    pub(crate) fn dim(op: &'static str, left: &[usize], right: &[usize]) -> Self {
        Error::Dimension {
            op,
            left: left.to_vec(),
            right: right.to_vec(),
        }
    }

    pub fn invalid(field: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::Validation {
            field: field.into(),
            reason: reason.into(),
        }
    }
}
