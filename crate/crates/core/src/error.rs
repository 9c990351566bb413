use std::path::PathBuf;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("image is {height}x{width} but the backbone needs at least {min}x{min}")]
    ImageTooSmall { height: usize, width: usize, min: usize },

    #[error("invalid retarget ratio: {0}")]
    InvalidRatio(String),

    #[error("invalid target size: {0}")]
    InvalidSize(String),

    #[error("attention field collapsed: every scale factor is <= 1e-8")]
    CollapsedProfile,

    #[error("invalid scaling profile: {0}")]
    InvalidProfile(String),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("checkpoint format version {found} is not supported (expected {expected})")]
    CheckpointVersion { found: String, expected: String },

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("dataset: {0}")]
    Dataset(String),

    #[error("missing saliency map {}", .0.display())]
    MissingSaliency(PathBuf),

    #[error("non-finite loss at step {step}; offending batch written to {}", dump.display())]
    NonFiniteLoss { step: u64, dump: PathBuf },

    #[error("config: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Image(#[from] image::ImageError),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
