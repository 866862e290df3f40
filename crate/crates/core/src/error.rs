use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("io error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed file {context}: {message}")]
    MalformedFile { context: String, message: String },

    #[error("schema violation in bbox `{bbox_id}` field `{field}`: {message}")]
    SchemaViolation {
        bbox_id: String,
        field: String,
        message: String,
    },

    #[error("bounding box out of bounds: {0}")]
    OutOfBounds(String),

    #[error("no readable images in {0}")]
    EmptyDirectory(PathBuf),

    #[error("duplicate join key `{0}` in metadata table")]
    DuplicateJoinKey(String),

    #[error("detector failed on {image}: {message}")]
    Detector { image: PathBuf, message: String },

    #[error("cannot read image {path}: {message}")]
    Image { path: PathBuf, message: String },

    #[error("config parse error: {0}")]
    ConfigParse(String),

    #[error("unknown config key `{0}`")]
    UnknownKey(String),

    #[error("invalid value at `{path}`: {constraint}")]
    InvalidValue { path: String, constraint: String },

    #[error("square side {side}px exceeds image {width}x{height} under shift strategy")]
    SquareExceedsImage { side: u32, width: u32, height: u32 },

    #[error("crop is not square: {width}x{height}")]
    NonSquareInput { width: u32, height: u32 },

    #[error("dataset is empty: {0}")]
    EmptyDataset(String),

    #[error("attribute `{attribute}` missing for {} entries (first: {})", bbox_ids.len(), bbox_ids.first().map(String::as_str).unwrap_or("-"))]
    MissingAttribute {
        attribute: String,
        bbox_ids: Vec<String>,
    },

    #[error("unsupported backbone `{0}`")]
    UnsupportedBackbone(String),

    #[error("pretrained weights for `{backbone}` unavailable at {path}")]
    WeightsUnavailable { backbone: String, path: PathBuf },

    #[error("{0} split is empty")]
    EmptySplit(String),

    #[error("non-finite loss in {stage} stage, epoch {epoch}, batch {batch} (lr {lr})")]
    NonFiniteLoss {
        stage: String,
        epoch: usize,
        batch: usize,
        lr: f64,
    },

    #[error("shape mismatch: expected {expected}, got {got}")]
    ShapeMismatch { expected: String, got: String },

    #[error("no records to evaluate")]
    EmptyEvaluation,

    #[error("label `{0}` is not part of the class scheme")]
    UnknownLabel(String),

    #[error("runs come from different configs: {0} vs {1}")]
    MixedConfig(String, String),

    #[error("run `{0}` already exists")]
    DuplicateRunId(String),

    #[error("experiment `{0}` not found")]
    ExperimentNotFound(String),

    #[error("{} already exists (refusing to overwrite)", .0.display())]
    OutputExists(PathBuf),

    #[error("{} not found; run `{stage}` first", path.display())]
    MissingStageOutput { path: PathBuf, stage: String },
}

/// Coarse error category, used for CLI exit codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorKind {
    Config,
    Data,
    Training,
    Other,
}

impl ErrorKind {
    pub fn exit_code(self) -> i32 {
        match self {
            ErrorKind::Config => 2,
            ErrorKind::Data => 3,
            ErrorKind::Training => 4,
            ErrorKind::Other => 1,
        }
    }
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn kind(&self) -> ErrorKind {
        use Error::*;
        match self {
            ConfigParse(_) | UnknownKey(_) | InvalidValue { .. } | UnsupportedBackbone(_) => {
                ErrorKind::Config
            }
            MalformedFile { .. }
            | SchemaViolation { .. }
            | OutOfBounds(_)
            | EmptyDirectory(_)
            | DuplicateJoinKey(_)
            | Detector { .. }
            | Image { .. }
            | SquareExceedsImage { .. }
            | NonSquareInput { .. }
            | EmptyDataset(_)
            | MissingAttribute { .. }
            | EmptySplit(_)
            | UnknownLabel(_)
            | EmptyEvaluation
            | OutputExists(_)
            | MissingStageOutput { .. } => ErrorKind::Data,
            WeightsUnavailable { .. } | NonFiniteLoss { .. } | ShapeMismatch { .. } => {
                ErrorKind::Training
            }
            Io { .. } | MixedConfig(..) | DuplicateRunId(_) | ExperimentNotFound(_) => {
                ErrorKind::Other
            }
        }
    }
}

/// Read a whole file, attaching the path to the error.
pub(crate) fn read_file(path: &std::path::Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::io(path, e))
}
