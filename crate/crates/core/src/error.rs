//! Error type shared across the crate.

use thiserror::Error;

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// A tensor or image did not have the shape an operation requires.
    #[error("shape mismatch in {context}: expected {expected}, got {got}")]
    ShapeMismatch {
        context: String,
        expected: String,
        got: String,
    },

    /// An adapter referenced attention layers the target model does not expose.
    #[error("adapter references unknown layers: {}", keys.join(", "))]
    UnknownLayers { keys: Vec<String> },

    /// A precondition on an argument was violated.
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// Image dimensions not divisible by the codec downsampling factor.
    #[error("image dimensions {width}x{height} not divisible by codec factor {factor}")]
    CodecDimensions {
        width: usize,
        height: usize,
        factor: usize,
    },

    /// A checkpoint archive or manifest could not be parsed.
    #[error("checkpoint error at {entry:?}: {message}")]
    Checkpoint {
        entry: Option<String>,
        message: String,
    },

    /// A named backend (generator, captioner, metric) is not registered.
    #[error("backend {name:?} unavailable: {detail}")]
    BackendUnavailable { name: String, detail: String },

    /// A feature vector had zero norm where cosine similarity is required.
    #[error("degenerate feature in {0}: zero norm")]
    DegenerateFeature(String),

    /// Non-finite values reached a place that rejects them.
    #[error("non-finite value in {0}")]
    NonFinite(String),

    /// Configuration file or key problem.
    #[error("config error: {0}")]
    Config(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("image codec error: {0}")]
    Image(#[from] image::ImageError),
}

impl Error {
    pub fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn shape(
        context: impl Into<String>,
        expected: impl Into<String>,
        got: impl Into<String>,
    ) -> Self {
        Error::ShapeMismatch {
            context: context.into(),
            expected: expected.into(),
            got: got.into(),
        }
    }
}
