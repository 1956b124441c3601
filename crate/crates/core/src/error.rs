use thiserror::Error;

/// Errors produced by the toolkit.
#[derive(Debug, Error)]
pub enum Error {
    #[error("insufficient data: {0}")]
    InsufficientData(String),

    #[error("shape mismatch: expected {expected} values, got {actual}")]
    ShapeMismatch { expected: usize, actual: usize },

    #[error("label {label} out of range for {n_classes} classes")]
    LabelOutOfRange { label: usize, n_classes: usize },

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("training diverged at epoch {epoch}: loss is not finite")]
    Diverged { epoch: usize },

    #[error("insufficient reference models for `{id}`: {n_in} IN, {n_out} OUT")]
    InsufficientModels { id: String, n_in: usize, n_out: usize },

    #[error("empty reference set: {0}")]
    EmptyReference(&'static str),

    #[error("a reference ensemble is required for the {0} statistic")]
    MissingEnsemble(&'static str),

    #[error("scores contain a single class; both labels are required")]
    SingleClass,

    #[error("no sample passed the membership pre-filter")]
    EmptySelection,

    #[error("covariance is singular")]
    SingularCovariance,

    #[error("curvature term is zero; no finite step bound exists")]
    ZeroCurvature,

    #[error("unknown fabrication variant `{0}`")]
    UnknownVariant(String),

    #[error("outcome protocol mismatch: expected {expected}, got {actual}")]
    ProtocolMismatch { expected: &'static str, actual: String },

    #[error("unknown sample id `{0}`")]
    UnknownId(String),

    #[error("malformed record at row {row}: {reason}")]
    MalformedRecord { row: usize, reason: String },

    #[error("malformed file: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
