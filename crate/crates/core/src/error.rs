use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("line {line}: {msg}")]
    MalformedCsv { line: u64, msg: String },

    #[error("byte offset {offset}: {msg}")]
    MalformedBinary { offset: usize, msg: String },

    #[error("event ({x}, {y}) outside {width}x{height} sensor")]
    OutOfBounds { x: u32, y: u32, width: u16, height: u16 },

    #[error("invalid polarity {0}")]
    Polarity(i64),

    #[error("event at t={t} outside window [{start}, {end})")]
    OutsideWindow { t: u64, start: u64, end: u64 },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("degenerate geometry: {0}")]
    Degenerate(String),

    #[error("weight file: {0}")]
    WeightFormat(String),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn invalid(msg: impl Into<String>) -> Error {
    Error::InvalidArgument(msg.into())
}

pub(crate) fn shape(msg: impl Into<String>) -> Error {
    Error::Shape(msg.into())
}
