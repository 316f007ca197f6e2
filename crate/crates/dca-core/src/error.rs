//! Error type shared by every module of the crate.

use thiserror::Error;

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, DcaError>;

/// All failure modes of the library.
#[derive(Debug, Error)]
pub enum DcaError {
    /// Two operands have incompatible shapes; carries both shapes.
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: (usize, usize),
        rhs: (usize, usize),
    },

    /// A scalar or structural parameter is out of its valid range.
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    /// A value that must be finite is NaN or infinite.
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    /// The training loss left the finite range.
    #[error("training diverged at step {step}: loss {loss}")]
    TrainingDiverged { step: u64, loss: f64 },

    /// Cosine scoring was asked to normalize a zero vector.
    #[error("degenerate embedding: zero norm")]
    DegenerateEmbedding,

    /// A speaker label is outside the classifier head's range.
    #[error("label {label} out of range for {n_speakers} speakers")]
    InvalidLabel { label: usize, n_speakers: usize },

    /// A trial references an utterance id that cannot be resolved.
    #[error("unknown utterance id: {0}")]
    MissingUtterance(String),

    /// Metric computation needs at least one target and one nontarget trial.
    #[error("insufficient trials: need at least one target and one nontarget")]
    InsufficientTrials,

    /// Two score sets do not describe the same trial list.
    #[error("misaligned trials at index {index}: {detail}")]
    MisalignedTrials { index: usize, detail: String },

    /// A data generator cannot satisfy the requested counts.
    #[error("insufficient data: {0}")]
    InsufficientData(String),

    /// A file does not follow its declared format.
    #[error("format error in {path}: {detail}")]
    Format { path: String, detail: String },

    /// A file ends or breaks mid-record; carries the byte offset.
    #[error("corrupt file {path} at byte {offset}: {detail}")]
    CorruptFile {
        path: String,
        offset: u64,
        detail: String,
    },

    /// An experiment configuration is internally inconsistent.
    #[error("config error: {0}")]
    Config(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl DcaError {
    /// Stable machine-readable tag for CLI error reporting.
    pub fn kind(&self) -> &'static str {
        match self {
            DcaError::ShapeMismatch { .. } => "shape_mismatch",
            DcaError::InvalidParameter(_) => "invalid_parameter",
            DcaError::NonFinite(_) => "non_finite",
            DcaError::TrainingDiverged { .. } => "training_diverged",
            DcaError::DegenerateEmbedding => "degenerate_embedding",
            DcaError::InvalidLabel { .. } => "invalid_label",
            DcaError::MissingUtterance(_) => "missing_utterance",
            DcaError::InsufficientTrials => "insufficient_trials",
            DcaError::MisalignedTrials { .. } => "misaligned_trials",
            DcaError::InsufficientData(_) => "insufficient_data",
            DcaError::Format { .. } => "format_error",
            DcaError::CorruptFile { .. } => "corrupt_file",
            DcaError::Config(_) => "config_error",
            DcaError::Io(_) => "io_error",
            DcaError::Json(_) => "json_error",
        }
    }
}
