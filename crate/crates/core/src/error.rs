use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("no face detected{}", frame.map(|f| format!(" in frame {f}")).unwrap_or_default())]
    NoFaceDetected { frame: Option<usize> },

    #[error("backend `{0}` is not available in this build")]
    BackendUnavailable(String),

    #[error("keypoint index {index} out of range (frame has {len} points)")]
    IndexOutOfRange { index: usize, len: usize },

    #[error("invalid keypoint index table: {0}")]
    InvalidTable(String),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("region {0} has zero area after clamping")]
    DegenerateRegion(String),

    #[error("cannot harmonize crops of different regions ({0} vs {1})")]
    RegionMismatch(String, String),

    #[error("invalid subset size {n} for {total} candidates")]
    InvalidCount { n: usize, total: usize },

    #[error("exhaustive search over {combinations} subsets exceeds the limit of {limit}")]
    InstanceTooLarge { combinations: u128, limit: u128 },

    #[error("invalid indices: {0}")]
    InvalidIndices(String),

    #[error("invalid distance matrix: {0}")]
    InvalidDistanceMatrix(String),

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("coefficient sum {0:e} is too close to zero to normalize")]
    DegenerateSum(f64),

    #[error("invalid anchor set: {0}")]
    InvalidAnchors(String),

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("generator backend `{0}` is not tunable")]
    BackendNotTunable(String),

    #[error("loss became non-finite{}", frame.map(|f| format!(" at frame {f}")).unwrap_or_default())]
    NonFiniteLoss { frame: Option<usize> },

    #[error("too few frames: have {have}, need {need}")]
    TooFewFrames { have: usize, need: usize },

    #[error("backend shapes differ: {0}")]
    BackendShapeMismatch(String),

    #[error("empty input: {0}")]
    EmptyInput(String),

    #[error("need at least {need} training embeddings, have {have}")]
    TooFewTrainImages { have: usize, need: usize },

    #[error("length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),

    #[error("missing artifact {0}")]
    MissingArtifact(PathBuf),

    #[error("content hash mismatch for {0}")]
    HashMismatch(PathBuf),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("I/O failure on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed document {path}: {message}")]
    Format { path: PathBuf, message: String },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn format(path: impl Into<PathBuf>, message: impl ToString) -> Self {
        Error::Format {
            path: path.into(),
            message: message.to_string(),
        }
    }
}
