use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension error: {0}")]
    Dimension(String),

    #[error("unsupported CFA pattern: {0}")]
    UnsupportedCfa(String),

    #[error("format error: {0}")]
    Format(String),

    #[error("profile error: {0}")]
    Profile(String),

    #[error("insufficient data: {0}")]
    InsufficientData(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("invalid model spec: {0}")]
    Spec(String),

    #[error("manifest entry {index}: {message}")]
    Manifest { index: usize, message: String },

    #[error("missing data: {}", .0.join(", "))]
    MissingData(Vec<String>),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    /// Process exit code used by the command-line front end.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::MissingData(_) | Error::InsufficientData(_) => 3,
            Error::Io(e) if e.kind() == std::io::ErrorKind::NotFound => 3,
            _ => 2,
        }
    }
}
