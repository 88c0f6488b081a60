use thiserror::Error;

#[derive(Debug, Error)]
pub enum MvsError {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("numerical error: {0}")]
    Numerical(String),
    #[error("format error: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, MvsError>;

impl MvsError {
    pub fn shape(msg: impl Into<String>) -> Self {
        MvsError::Shape(msg.into())
    }
}
