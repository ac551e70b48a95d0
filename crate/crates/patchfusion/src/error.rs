use thiserror::Error;

/// Library-wide error type.
///
/// Variants are grouped by recovery class: `Shape`/`Invalid*` are caller
/// bugs or bad data, `NonFinite*`/`NanLoss` are numerical aborts, the rest
/// are I/O or format problems.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("loss must be a scalar tensor, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("backward called twice on the same tape without reset")]
    BackwardConsumed,

    #[error("non-finite values encountered in {0}")]
    NonFinite(String),

    #[error("non-finite gradient for parameter `{0}`")]
    NonFiniteGrad(String),

    #[error("training aborted: loss became non-finite at epoch {epoch}, batch {batch}")]
    NanLoss { epoch: usize, batch: usize },

    #[error("insufficient tissue: only {found} pixels above the optical-density threshold (need {required})")]
    InsufficientTissue { found: usize, required: usize },

    #[error("degenerate stain statistics: {0}")]
    DegenerateStains(String),

    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },

    #[error("manifest error: {0}")]
    Manifest(String),

    #[error("checkpoint error in {path}: {message}")]
    Checkpoint { path: String, message: String },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("image error on {path}: {message}")]
    Image { path: String, message: String },

    #[error("csv error: {0}")]
    Csv(String),

    #[error("fold {fold}: {source}")]
    Fold {
        fold: usize,
        #[source]
        source: Box<Error>,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True for errors that indicate a numerical abort rather than bad
    /// input data (used by the CLI to pick an exit code).
    pub fn is_numerical(&self) -> bool {
        match self {
            Error::NonFinite(_) | Error::NonFiniteGrad(_) | Error::NanLoss { .. } => true,
            Error::Fold { source, .. } => source.is_numerical(),
            _ => false,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
