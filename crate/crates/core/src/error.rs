use autodiff::AdError;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// A precondition on the inputs was violated.
    #[error("{0}")]
    Invalid(String),
    #[error("not enough distinct colors: need {needed}, found {found}")]
    TooFewColors { needed: usize, found: usize },
    #[error("palette size mismatch: expected k = {expected}, got {found}")]
    PaletteSize { expected: usize, found: usize },
    #[error("numerical failure: {0}")]
    Numerical(String),
    #[error("tensor error: {0}")]
    Tensor(#[from] AdError),
    #[error("format version mismatch: found {found:?}, expected {expected:?}")]
    Version { found: String, expected: String },
    #[error("malformed artifact: {0}")]
    Format(String),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
    #[error("image codec: {0}")]
    Image(#[from] ::image::ImageError),
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::Invalid(msg.into())
    }

    /// True for failures caused by non-finite values during optimization.
    pub fn is_numerical(&self) -> bool {
        matches!(self, Error::Numerical(_))
    }
}
