use thiserror::Error;

#[derive(Debug, Error)]
pub enum GmsError {
    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("index {index} out of range (len {len})")]
    OutOfRange { index: usize, len: usize },

    #[error("incompatible right-hand side: {0}")]
    Incompatible(String),

    #[error("singular system: {0}")]
    Singular(String),

    #[error("degenerate local problem on coarse face {face}: {reason}")]
    Degenerate { face: usize, reason: String },

    #[error("parse error: {0}")]
    Parse(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, GmsError>;
