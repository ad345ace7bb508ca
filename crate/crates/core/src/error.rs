use std::io;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("non-finite input value {0}")]
    NonFinite(f64),

    #[error("invalid block scale {0} (must be positive and finite)")]
    InvalidScale(f32),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("row length {0} is not a multiple of the block size 16")]
    Misaligned(usize),

    #[error("negative sensitivity weight {value} at index {index}")]
    NegativeWeight { index: usize, value: f32 },

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("ratio {0} is outside [0, 1]")]
    Ratio(f64),

    #[error("missing channel statistics: {0}")]
    MissingStats(String),

    #[error("malformed file: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] io::Error),
}
