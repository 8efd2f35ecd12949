use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("empty input")]
    EmptyInput,

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("scan direction set invalid: {0}")]
    DirectionSetInvalid(String),

    #[error("channel count {0} cannot be split 1:1")]
    OddChannelSplit(usize),

    #[error("scan order {0} outside [1, 5]")]
    OrderOutOfRange(usize),

    #[error("invalid config: {0}")]
    ConfigInvalid(String),

    #[error("expected 6 skip maps, got {0}")]
    SkipSetInvalid(usize),

    #[error("spatial dims {height}x{width} must be multiples of {multiple}")]
    SpatialDivisibility {
        height: usize,
        width: usize,
        multiple: usize,
    },

    #[error("slide {height}x{width} is smaller than patch size {size}")]
    SlideTooSmall {
        height: usize,
        width: usize,
        size: usize,
    },

    #[error("{patients} distinct patients cannot fill {folds} folds")]
    InsufficientPatients { patients: usize, folds: usize },

    #[error("stain reference has zero variance")]
    DegenerateReference,

    #[error("{requested} segments requested for {pixels} pixels")]
    TooManySegments { requested: usize, pixels: usize },

    #[error("all class supports are zero")]
    NoSupport,

    #[error("every pixel is unsupervised")]
    NoSupervision,

    #[error("loss diverged at step {step}")]
    Divergence { step: usize },

    #[error("corrupt checkpoint: {0}")]
    CorruptCheckpoint(String),

    #[error("invalid label value {0}")]
    InvalidLabel(u8),

    #[error("dataset layout: {0}")]
    Layout(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Image(#[from] image::ImageError),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::ShapeMismatch(msg.into())
    }
}
