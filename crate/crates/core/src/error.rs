//! Error type shared across the library.

/// Alias used by every fallible function in the crate.
pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Incompatible tensor shapes or an invalid axis; the message names the
    /// offending shapes.
    #[error("dimension error: {0}")]
    Dimension(String),

    /// A model or run configuration violates one of its constraints.
    #[error("config error: {0}")]
    Config(String),

    /// Malformed or out-of-range input data (bad token id, bad label, ...).
    #[error("data error: {0}")]
    Data(String),

    /// API misuse, e.g. backward on a non-scalar or a second backward
    /// without rebuilding the graph.
    #[error("usage error: {0}")]
    Usage(String),

    /// Training-time failure such as a NaN gradient.
    #[error("training error: {0}")]
    Training(String),

    /// A TSV header or record does not match the declared schema.
    #[error("schema error: {0}")]
    Schema(String),

    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),

    #[error("serialization error: {0}")]
    Json(#[from] serde_json::Error),
}
