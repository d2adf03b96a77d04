use thiserror::Error;

/// Every failure the library can report.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("matrix is numerically singular: pivot {pivot:e} not above threshold {threshold:e}")]
    Singular { pivot: f64, threshold: f64 },

    #[error("numeric guard tripped in {op}: {detail}")]
    NumericGuard { op: &'static str, detail: String },

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("contract violated: {0}")]
    Contract(String),

    #[error("degenerate batch: {0}")]
    DegenerateBatch(String),

    #[error("format error at byte {offset}: {detail}")]
    Format { offset: u64, detail: String },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape { op, detail: detail.into() }
    }

    /// Process exit status for the command-line front end:
    /// 1 validation, 2 numeric failure, 3 I/O.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Shape { .. } | Error::Contract(_) | Error::DegenerateBatch(_) | Error::Config(_) => 1,
            Error::Singular { .. } | Error::NumericGuard { .. } | Error::NonFinite(_) => 2,
            Error::Format { .. } | Error::Io(_) => 3,
        }
    }
}
