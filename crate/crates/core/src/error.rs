use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: shape mismatch, expected {expected}, found {found}")]
    Shape {
        op: &'static str,
        expected: String,
        found: String,
    },

    #[error("{what}: rank {rank} out of range (max {max})")]
    Rank {
        what: &'static str,
        rank: usize,
        max: usize,
    },

    #[error("backward called with a cache from a different forward pass")]
    StaleCache,

    #[error("non-finite {what} at step {step}")]
    NonFinite { what: &'static str, step: usize },

    #[error("adapter base is quantized; dequantize before materializing effective weights")]
    QuantizedBase,

    #[error("decay mode {0} requires auxiliary state that was not provided")]
    MissingDecayState(&'static str),

    #[error("decay mode {mode} is not valid for the {view} view")]
    DecayView {
        mode: &'static str,
        view: &'static str,
    },

    #[error("quantized code {code} out of range for {format}")]
    CorruptCode { code: i32, format: &'static str },

    #[error("distributed init needs workers*rank <= dim, got {workers}*{rank} > {dim}")]
    TooManyBlocks {
        workers: usize,
        rank: usize,
        dim: usize,
    },

    #[error("workers are desynchronized: {0}")]
    Desynchronized(String),

    #[error("unknown method: {0}")]
    UnknownMethod(String),

    #[error("invalid config: {0}")]
    Config(String),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn shape(
        op: &'static str,
        expected: impl std::fmt::Display,
        found: impl std::fmt::Display,
    ) -> Self {
        Error::Shape {
            op,
            expected: expected.to_string(),
            found: found.to_string(),
        }
    }
}
