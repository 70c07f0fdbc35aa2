use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("empty weight tensor")]
    EmptyTensor,

    #[error("invalid scale {0}")]
    InvalidScale(f32),

    #[error("unsupported bit-width {0} (must be in 2..=8)")]
    InvalidBitWidth(u32),

    #[error("index {index} outside clip range [{lower}, {upper}]")]
    IndexOutOfRange { index: i32, lower: i32, upper: i32 },

    #[error("up-scaling bit {0} is not 0 or 1")]
    InvalidUpscaleBit(u8),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("numeric overflow at layer {0}")]
    NumericOverflow(usize),

    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },

    #[error("invalid config key `{key}`: {reason}")]
    Config { key: String, reason: String },

    #[error("dataset error: {0}")]
    Dataset(String),

    #[error(transparent)]
    Pack(#[from] crate::pack::PackError),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn config(key: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::Config {
            key: key.into(),
            reason: reason.into(),
        }
    }
}
