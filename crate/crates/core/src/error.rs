use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// Tensor or layer shapes do not line up.
    #[error("shape mismatch in {op}: expected {expected}, found {found}")]
    Shape {
        op: &'static str,
        expected: String,
        found: String,
    },

    /// Invalid configuration or architecture parameters.
    #[error("configuration error: {0}")]
    Config(String),

    /// An API was called outside its contract (empty batch, foreign tape variable, ...).
    #[error("usage error: {0}")]
    Usage(String),

    /// Input data is not usable (non-finite values, wrong length).
    #[error("input error: {0}")]
    Input(String),

    /// Not enough samples to satisfy a requested split or ratio.
    #[error("insufficient samples: {0}")]
    Insufficient(String),

    /// A loss or gradient became non-finite.
    #[error("training diverged: {0}")]
    Diverged(String),

    #[error("ingestion error: {0}")]
    Ingest(String),

    #[error("checkpoint format error: {0}")]
    Format(String),

    #[error("checkpoint checksum mismatch: stored {stored:#010x}, computed {computed:#010x}")]
    Checksum { stored: u32, computed: u32 },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn shape(
        op: &'static str,
        expected: impl Into<String>,
        found: impl Into<String>,
    ) -> Self {
        Error::Shape {
            op,
            expected: expected.into(),
            found: found.into(),
        }
    }
}
