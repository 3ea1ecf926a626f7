use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("empty grid: bounding box has zero or negative extent")]
    EmptyGrid,
    #[error("invalid bounding box: {0}")]
    InvalidBbox(String),
    #[error("cell ({row}, {col}) is outside a {rows}x{cols} grid")]
    CellOutOfRange {
        row: usize,
        col: usize,
        rows: usize,
        cols: usize,
    },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: corrupt input ({malformed} of {total} lines malformed)")]
    CorruptInput {
        path: PathBuf,
        malformed: usize,
        total: usize,
    },
    #[error("{path}:{line}: XML syntax error: {message}")]
    Xml {
        path: PathBuf,
        line: usize,
        message: String,
    },
    #[error("dimension mismatch in {context}: expected {expected}, got {got}")]
    DimensionMismatch {
        context: String,
        expected: usize,
        got: usize,
    },
    #[error("image too small: {height}x{width}, need at least {min}x{min}")]
    ImageTooSmall {
        height: usize,
        width: usize,
        min: usize,
    },
    #[error("empty measure: edge map has no edge pixels")]
    EmptyMeasure,
    #[error("degenerate regression: need at least two box sizes with mass")]
    DegenerateRegression,
    #[error("need at least {needed} distinct points for clustering, got {got}")]
    TooFewPoints { needed: usize, got: usize },
    #[error("degenerate labeling: need at least 3 distinct severity values, got {0}")]
    DegenerateLabeling(usize),
    #[error("shape mismatch at node {node} ({op}): {detail}")]
    Shape {
        node: usize,
        op: &'static str,
        detail: String,
    },
    #[error("non-finite value produced at node {node} ({op})")]
    NonFinite { node: usize, op: &'static str },
    #[error("loss must be a scalar, got {rows}x{cols}")]
    NonScalarLoss { rows: usize, cols: usize },
    #[error("diverged: {0}")]
    Diverged(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("empty class {0}: every class needs at least one sample")]
    EmptyClass(usize),
    #[error("empty test set")]
    EmptyTestSet,
    #[error("model is in training mode; switch it to evaluation mode first")]
    TrainingMode,
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("config error at `{key}`: {message}")]
    Config { key: String, message: String },
    #[error("missing artifact {path} (run the `{stage}` stage first)")]
    MissingArtifact { stage: String, path: PathBuf },
    #[error("{path}: {message}")]
    Parse { path: PathBuf, message: String },
    #[error("image {path}: {message}")]
    Image { path: PathBuf, message: String },
    #[error("workdir is locked by another run: {0}")]
    Locked(PathBuf),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
