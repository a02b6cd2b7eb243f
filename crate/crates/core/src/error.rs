use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("{op}: shape mismatch, expected {expected:?}, got {got:?}")]
    Shape {
        op: &'static str,
        expected: Vec<usize>,
        got: Vec<usize>,
    },
    #[error("{op}: expected rank {expected}, got {got}")]
    Rank {
        op: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("{op}: produced a non-finite value")]
    NonFinite { op: &'static str },
    #[error("contract violated: {0}")]
    Contract(String),
}

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("invalid parameter: {0}")]
    Param(String),
    #[error("timestep {t} outside 1..={steps}")]
    Timestep { t: usize, steps: usize },
    #[error("empty input: {0}")]
    Empty(&'static str),
    #[error("shape has no interior volume within the sampling budget")]
    EmptyShape,
    #[error("label {0} not present")]
    MissingLabel(u32),
    #[error("unknown token {0:?}")]
    UnknownToken(String),
    #[error("invalid format: {0}")]
    Format(String),
    #[error("config mismatch: {0}")]
    ConfigMismatch(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    /// Stable short name of the variant, for machine-readable error lines.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Tensor(_) => "tensor",
            Error::Param(_) => "param",
            Error::Timestep { .. } => "timestep",
            Error::Empty(_) => "empty",
            Error::EmptyShape => "empty_shape",
            Error::MissingLabel(_) => "missing_label",
            Error::UnknownToken(_) => "unknown_token",
            Error::Format(_) => "format",
            Error::ConfigMismatch(_) => "config_mismatch",
            Error::Io(_) => "io",
            Error::Json(_) => "json",
        }
    }
}
