use std::path::PathBuf;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("video {video_id}: {reason}")]
    MissingFrames { video_id: String, reason: String },

    #[error("malformed landmarks in {path}: {reason}")]
    MalformedLandmarks { path: PathBuf, reason: String },

    #[error("video {video_id} has {frames} frames, need at least {required}")]
    TooShort {
        video_id: String,
        frames: usize,
        required: usize,
    },

    #[error("degenerate convex hull: {0}")]
    DegenerateHull(String),

    #[error("landmark count mismatch: {frames} frames but {landmarks} landmark sets")]
    LandmarkCountMismatch { frames: usize, landmarks: usize },

    #[error("mask of {height}x{width} cannot be split into {patches} square patches")]
    NonSquareDivisible {
        height: usize,
        width: usize,
        patches: usize,
    },

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("config mismatch: {0}")]
    ConfigMismatch(String),

    #[error("config error at `{key}`: {reason}")]
    Config { key: String, reason: String },

    #[error("AUC needs both classes, got {positives} fake and {negatives} real")]
    SingleClass { positives: usize, negatives: usize },

    #[error("dataset is empty: {0}")]
    EmptyDataset(String),

    #[error("blending failed after {attempts} attempts: {last}")]
    BlendRetriesExhausted { attempts: usize, last: String },

    #[error("non-finite loss at step {step}: {detail}")]
    NonFiniteLoss { step: usize, detail: String },

    #[error("checkpoint {path}: {reason}")]
    Checkpoint { path: PathBuf, reason: String },

    #[error("output directory {0} already exists (use --force to overwrite)")]
    OutputExists(PathBuf),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: {source}")]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },

    #[error("{path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },

    #[error(transparent)]
    Tensor(#[from] candle_core::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn config(key: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::Config {
            key: key.into(),
            reason: reason.into(),
        }
    }

    /// Short machine-readable tag used in the CLI's error JSON.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::MissingFrames { .. } => "missing_frames",
            Error::MalformedLandmarks { .. } => "malformed_landmarks",
            Error::TooShort { .. } => "too_short",
            Error::DegenerateHull(_) => "degenerate_hull",
            Error::LandmarkCountMismatch { .. } => "landmark_count_mismatch",
            Error::NonSquareDivisible { .. } => "non_square_divisible",
            Error::ShapeMismatch(_) => "shape_mismatch",
            Error::ConfigMismatch(_) => "config_mismatch",
            Error::Config { .. } => "config",
            Error::SingleClass { .. } => "single_class",
            Error::EmptyDataset(_) => "empty_dataset",
            Error::BlendRetriesExhausted { .. } => "blend_retries_exhausted",
            Error::NonFiniteLoss { .. } => "non_finite_loss",
            Error::Checkpoint { .. } => "checkpoint",
            Error::OutputExists(_) => "output_exists",
            Error::Io { .. } => "io",
            Error::Image { .. } => "image",
            Error::Json { .. } => "json",
            Error::Tensor(_) => "tensor",
        }
    }
}
