use thiserror::Error;

/// Errors raised by the segmentation pipeline.
#[derive(Debug, Error)]
pub enum OmError {
    /// Tensor shapes incompatible for an operation; both shapes are spelled out.
    #[error("{op}: shape mismatch, {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("{op}: invalid argument: {msg}")]
    InvalidArgument { op: &'static str, msg: String },

    /// A forward op produced a non-finite value from finite inputs.
    #[error("{op}: non-finite value produced")]
    NonFinite { op: &'static str },

    /// Voxel label outside the [0, num_classes) range of the current task.
    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: u8, classes: usize },

    /// Channel-importance denominator is exactly zero: the guidance signal
    /// carries no information (dead feature map or all-zero probabilities).
    #[error("degenerate guidance: {0}")]
    DegenerateGuidance(String),

    /// A modality has zero variance over the brain mask; normalization is undefined.
    #[error("zero variance in modality {modality}")]
    ZeroVariance { modality: usize },

    /// A surface-distance metric was requested on an empty mask.
    #[error("undefined metric: {0}")]
    UndefinedMetric(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("file format error: {0}")]
    Format(String),

    #[error("internal error: {0}")]
    Internal(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, OmError>;
