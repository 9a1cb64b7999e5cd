use std::path::PathBuf;
use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("missing file: {}", .0.display())]
    MissingFile(PathBuf),

    #[error("i/o error on {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("schema mismatch in {context}: {message}")]
    Schema { context: String, message: String },

    #[error("invalid manifest: {0}")]
    Manifest(#[from] ManifestViolation),

    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },

    #[error("non-finite value at row {row}, column {col}")]
    NonFinite { row: usize, col: usize },

    #[error("too few samples for {what}: need {needed}, have {have}")]
    TooShort {
        what: &'static str,
        needed: usize,
        have: usize,
    },

    #[error("input contains NaN: {0}")]
    NanInput(&'static str),

    #[error("constant input: {0}")]
    ConstantInput(&'static str),

    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("statistic undefined on {undefined} of {total} resamples")]
    UnstableResampling { undefined: usize, total: usize },

    #[error("optimization diverged at epoch {epoch}")]
    Diverged { epoch: usize },

    #[error("not identifiable: {0}")]
    Unidentifiable(&'static str),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("missing stage output: {0}")]
    MissingStage(String),
}

/// Distinct manifest invariant violations.
#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ManifestViolation {
    #[error("unsupported schema_version {0}")]
    SchemaVersion(i64),
    #[error("stride_tokens must be >= 1")]
    Stride,
    #[error("layers not increasing for model {0}")]
    LayersNotIncreasing(String),
    #[error("negative layer index for model {0}")]
    NegativeLayer(String),
    #[error("hidden_dim must be >= 1 for model {0}")]
    HiddenDim(String),
    #[error("duplicate model id {0}")]
    DuplicateModel(String),
    #[error("model {model} references unknown baseline {baseline}")]
    UnknownBaseline { model: String, baseline: String },
    #[error("model {model} references {baseline}, which is not a baseline-role model")]
    BaselineRole { model: String, baseline: String },
    #[error("runs_per_item must be >= 1")]
    Runs,
    #[error("missing model directory {0}")]
    MissingModelDir(String),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        let path = path.into();
        if source.kind() == std::io::ErrorKind::NotFound {
            Error::MissingFile(path)
        } else {
            Error::Io { path, source }
        }
    }

    pub fn schema(context: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Schema {
            context: context.into(),
            message: message.into(),
        }
    }

    /// Numeric failures map to a different process exit code than data errors.
    pub fn is_numeric(&self) -> bool {
        matches!(
            self,
            Error::Diverged { .. }
                | Error::ConstantInput(_)
                | Error::Degenerate(_)
                | Error::UnstableResampling { .. }
                | Error::Unidentifiable(_)
                | Error::TooShort { .. }
        )
    }
}
