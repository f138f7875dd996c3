use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("invalid data: {0}")]
    Data(String),

    #[error("insufficient data: {0}")]
    InsufficientData(String),

    #[error("numerical failure at stage {stage}, group {group}: {detail}")]
    Numerical {
        stage: usize,
        group: usize,
        detail: String,
    },

    #[error("invalid prior: entry {index} is {value}")]
    InvalidPrior { index: usize, value: f64 },

    #[error("index out of range: {0}")]
    Index(String),

    #[error("plan does not match model: {0}")]
    PlanMismatch(String),

    #[error("corrupt stream at bit {bit_offset}: {detail}")]
    Corruption { bit_offset: u64, detail: String },

    #[error("corrupt file: {0}")]
    Format(String),

    #[error("digest mismatch: expected {expected:016x}, found {found:016x} ({what})")]
    DigestMismatch {
        what: &'static str,
        expected: u64,
        found: u64,
    },

    #[error("invalid state: {0}")]
    State(String),

    #[error("instance too large for exhaustive search: {0}")]
    SizeGuard(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

/// Coarse classification used for process exit codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorClass {
    Config,
    Data,
    Corruption,
    State,
    Io,
}

impl Error {
    pub fn class(&self) -> ErrorClass {
        match self {
            Error::Config(_) | Error::SizeGuard(_) | Error::Index(_) => ErrorClass::Config,
            Error::Data(_) | Error::InsufficientData(_) | Error::Numerical { .. } => {
                ErrorClass::Data
            }
            Error::Corruption { .. }
            | Error::Format(_)
            | Error::DigestMismatch { .. }
            | Error::InvalidPrior { .. }
            | Error::PlanMismatch(_)
            | Error::Json(_) => ErrorClass::Corruption,
            Error::State(_) => ErrorClass::State,
            Error::Io(_) => ErrorClass::Io,
        }
    }

    pub fn exit_code(&self) -> i32 {
        match self.class() {
            ErrorClass::Io => 1,
            ErrorClass::Config => 2,
            ErrorClass::Data => 3,
            ErrorClass::Corruption => 4,
            ErrorClass::State => 5,
        }
    }

    pub(crate) fn corrupt(bit_offset: u64, detail: impl Into<String>) -> Self {
        Error::Corruption {
            bit_offset,
            detail: detail.into(),
        }
    }
}
