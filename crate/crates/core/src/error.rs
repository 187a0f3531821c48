use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

/// Every failure the library reports. All variants are data or contract
/// errors; usage errors live in the CLI.
#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error on {path}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed header {path}: {reason}")]
    MalformedHeader { path: PathBuf, reason: String },

    #[error("payload size mismatch in {path}: header implies {expected} bytes, found {found}")]
    SizeMismatch {
        path: PathBuf,
        expected: u64,
        found: u64,
    },

    #[error("invalid raster: {0}")]
    InvalidRaster(String),

    #[error("shape mismatch: {left} vs {right}")]
    ShapeMismatch { left: String, right: String },

    #[error("invalid band spec: {0}")]
    InvalidBand(String),

    #[error("sample table error: {0}")]
    Samples(String),

    #[error("duplicate sample id {0:?}")]
    DuplicateId(String),

    #[error("label {label} of sample {id:?} is not in the legend")]
    LabelOutsideLegend { id: String, label: u32 },

    #[error("sample {id:?} violates invariant: {reason}")]
    InvariantViolation { id: String, reason: String },

    #[error("points outside raster extent: {}", .0.join(", "))]
    OutsideExtent(Vec<String>),

    #[error("band index {index} out of range for {bands} bands")]
    BandIndex { index: usize, bands: usize },

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("too few valid pixels: need at least {needed}, have {have}")]
    TooFewPixels { needed: usize, have: usize },

    #[error("singular covariance matrix ({0})")]
    SingularCovariance(&'static str),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("illegal mask code {code} at pixel index {index}")]
    IllegalMaskCode { code: u8, index: usize },

    #[error("no valid pixels")]
    NoValidPixels,

    #[error("degenerate label set: {0}")]
    DegenerateLabels(String),

    #[error("training data error: {0}")]
    Training(String),

    #[error("NaN features in rows {rows:?}")]
    NanFeatures { rows: Vec<usize> },

    #[error("model file error: {0}")]
    ModelFormat(String),

    #[error("fewer distinct points ({distinct}) than clusters ({k})")]
    TooFewDistinctPoints { distinct: usize, k: usize },

    #[error("missing input: {0}")]
    MissingInput(String),

    #[error("empty test fold {0}")]
    EmptyFold(usize),

    #[error("invalid synthetic config: {0}")]
    SynthConfig(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
