use thiserror::Error;

/// Errors raised across the pipeline.
///
/// The variant names double as the machine-readable cause reported by the CLI.
#[derive(Debug, Error)]
pub enum HopeError {
    #[error("dimension error: {0}")]
    Dimension(String),
    #[error("contract error: {0}")]
    Contract(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("format error: {0}")]
    Format(String),
    #[error("validation error: {0}")]
    Validation(String),
    #[error("init error: {0}")]
    Init(String),
    #[error("training error: {0}")]
    Training(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, HopeError>;

macro_rules! bail {
    ($kind:ident, $($arg:tt)*) => {
        return Err($crate::error::HopeError::$kind(format!($($arg)*)))
    };
}
pub(crate) use bail;
