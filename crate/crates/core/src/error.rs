use thiserror::Error;

/// Every failure the pipeline can report.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid scene spec: {0}")]
    InvalidSpec(String),
    #[error("point cloud is empty")]
    EmptyCloud,
    #[error("cluster has {0} points, at least 3 are required")]
    InsufficientPoints(usize),
    #[error("no lane sample projects into the image")]
    EmptyProjection,
    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("grid configuration mismatch")]
    ConfigMismatch,
    #[error("pooling mask is empty")]
    EmptyMask,
    #[error("embedding set is empty")]
    EmptySet,
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("row anchors differ between prediction and ground truth: {0}")]
    AnchorMismatch(String),
    #[error("config: {0}")]
    Config(String),
    #[error("format: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Short machine-readable tag of the variant.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::InvalidSpec(_) => "InvalidSpec",
            Error::EmptyCloud => "EmptyCloud",
            Error::InsufficientPoints(_) => "InsufficientPoints",
            Error::EmptyProjection => "EmptyProjection",
            Error::DimensionMismatch { .. } => "DimensionMismatch",
            Error::ShapeMismatch(_) => "ShapeMismatch",
            Error::ConfigMismatch => "ConfigMismatch",
            Error::EmptyMask => "EmptyMask",
            Error::EmptySet => "EmptySet",
            Error::EmptyDataset => "EmptyDataset",
            Error::AnchorMismatch(_) => "AnchorMismatch",
            Error::Config(_) => "Config",
            Error::Format(_) => "Format",
            Error::Io(_) => "Io",
            Error::Json(_) => "Json",
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
