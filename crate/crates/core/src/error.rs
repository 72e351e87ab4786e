use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Dimension {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("label {label} at index {index} is outside [0, {classes})")]
    Label {
        index: usize,
        label: usize,
        classes: usize,
    },

    #[error("non-deterministic objective: two evaluations gave {first} and {second}")]
    Determinism { first: f64, second: f64 },

    #[error("config error: {0}")]
    Config(String),

    #[error("format error at byte {offset}: {reason}")]
    Format { offset: usize, reason: String },

    #[error("data error: {0}")]
    Data(String),

    #[error("bounds error: {0}")]
    Bounds(String),

    #[error("contract violated: {0}")]
    Contract(String),

    #[error("incompatible checkpoint: {0}")]
    Compatibility(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn dim(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        Error::Dimension {
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }

    pub(crate) fn format(offset: usize, reason: impl Into<String>) -> Self {
        Error::Format {
            offset,
            reason: reason.into(),
        }
    }
}
