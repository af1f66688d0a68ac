use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: shape mismatch, {left_name}={left} vs {right_name}={right}")]
    ShapeMismatch {
        op: &'static str,
        left_name: &'static str,
        left: usize,
        right_name: &'static str,
        right: usize,
    },

    #[error("{op}: incompatible shapes {left:?} and {right:?}")]
    IncompatibleShapes {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },

    #[error("{op}: {what}={value} is not divisible by {divisor}")]
    Indivisible {
        op: &'static str,
        what: &'static str,
        value: usize,
        divisor: usize,
    },

    #[error("{op}: invalid argument: {msg}")]
    InvalidArgument { op: &'static str, msg: String },

    #[error("invalid model config: {0}")]
    InvalidConfig(String),

    #[error("condensation schedule: {0}")]
    Schedule(String),

    #[error("model is not fully condensed: {0}")]
    NotCondensed(String),

    #[error("model is already in test form")]
    AlreadyConverted,

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("missing gradient for {0}")]
    MissingGradient(String),

    #[error("{path}: malformed data at byte offset {offset}: {msg}")]
    Format {
        path: String,
        offset: usize,
        msg: String,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn invalid(op: &'static str, msg: impl Into<String>) -> Self {
        Error::InvalidArgument {
            op,
            msg: msg.into(),
        }
    }
}
