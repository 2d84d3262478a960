use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Error, Debug)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArg(String),
    #[error("sample position (row {row}, col {col}) outside raster")]
    OutOfBounds { row: f64, col: f64 },
    #[error("malformed file: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("terrain class {0} is not traversable")]
    NonTraversable(u8),
    #[error("path needs at least two distinct points")]
    DegeneratePath,
    #[error("segment start and end coincide")]
    DegenerateSegment,
    #[error("patch side {side} m is not a whole number of {resolution} m cells")]
    ResolutionMismatch { side: f64, resolution: f64 },
    #[error("no usable samples")]
    EmptyDataset,
    #[error("shape mismatch: expected {expected}, got {got}")]
    ShapeMismatch { expected: String, got: String },
    #[error("empty batch")]
    EmptyBatch,
    #[error("training diverged at epoch {epoch} (loss {loss})")]
    DivergenceDetected { epoch: usize, loss: f64 },
    #[error("path has no complete segment")]
    EmptyPath,
    #[error("no log records inside the time window")]
    EmptyWindow,
    #[error("goal is unreachable from start")]
    Unreachable,
    #[error("ground truth is zero")]
    ZeroTruth,
    #[error("split has no samples")]
    EmptySplit,
    #[error("non-positive prediction (v_hat = {v_hat}, w_hat = {w_hat})")]
    NonPositivePrediction { w_hat: f64, v_hat: f64 },
    #[error("segment {index}: {source}")]
    Segment {
        index: usize,
        #[source]
        source: Box<Error>,
    },
}

impl Error {
    /// True for failures caused by reading or writing files.
    pub fn is_io(&self) -> bool {
        match self {
            Error::Io(_) => true,
            Error::Segment { source, .. } => source.is_io(),
            _ => false,
        }
    }
}
