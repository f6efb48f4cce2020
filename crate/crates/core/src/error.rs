use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Error, Debug)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("missing file: {0}")]
    MissingFile(PathBuf),

    #[error("cannot decode image {path}: {message}")]
    Decode { path: PathBuf, message: String },

    #[error("malformed input at line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("dimension mismatch: expected {expected:?}, found {found:?}")]
    DimensionMismatch {
        expected: (usize, usize),
        found: (usize, usize),
    },

    #[error("timestamps must be strictly increasing (violated at frame {index})")]
    NonMonotoneTimestamps { index: usize },

    #[error("too few frames: {found} given, at least {required} required")]
    TooFewFrames { found: usize, required: usize },

    #[error("non-finite input value")]
    NonFiniteInput,

    #[error("intensity {value} at frame {frame} outside [0, 1]")]
    IntensityOutOfRange { frame: usize, value: f64 },

    #[error("downsampling factor must be at least 1")]
    ZeroFactor,

    #[error("invalid parameter `{name}`: {reason}")]
    InvalidParameter { name: &'static str, reason: String },

    #[error("{requested} scales requested but at most {max} fit a {width}x{height} frame")]
    TooManyScales {
        requested: usize,
        max: usize,
        width: usize,
        height: usize,
    },

    #[error("degenerate frame dimensions {width}x{height} (need even sides of at least 16)")]
    DegenerateDimensions { width: usize, height: usize },

    #[error("pyramid provenance does not match the filter bank")]
    ProvenanceMismatch,

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("timestamps are not uniformly sampled (relative deviation {deviation:.4})")]
    NonUniformSampling { deviation: f64 },

    #[error("window size {0} must be odd")]
    EvenWindow(usize),

    #[error("frame {width}x{height} is too small for {levels} pyramid levels with window {window}")]
    FrameTooSmallForLevels {
        width: usize,
        height: usize,
        levels: usize,
        window: usize,
    },

    #[error("empty displacement series")]
    EmptySeries,

    #[error("prism at {0:?} lies outside the frame")]
    PrismOutOfFrame([f64; 2]),

    #[error("prism at {position:?} has no valid flow nearby (frame {frame})")]
    PrismUntracked { position: [f64; 2], frame: usize },

    #[error("ring sample {index} has no valid flow nearby")]
    PointUntracked { index: usize },

    #[error("invalid scene spec: {0}")]
    SpecInvalid(String),

    #[error("invalid config field `{field}`: {reason}")]
    Config { field: String, reason: String },

    #[error("unknown stage `{0}`")]
    UnknownStage(String),

    #[error("missing intermediate {0}")]
    MissingIntermediate(PathBuf),

    #[error("output directory {0} is locked by another run")]
    Locked(PathBuf),

    #[error("bad flow file {path}: {message}")]
    FlowFormat { path: PathBuf, message: String },

    #[error("stage `{stage}` failed: {source}")]
    StageFailed {
        stage: String,
        #[source]
        source: Box<Error>,
    },
}

impl Error {
    /// True for errors caught before any stage ran: bad configuration,
    /// unknown stage, or a locked output directory.
    pub fn is_validation(&self) -> bool {
        !matches!(self, Error::StageFailed { .. })
    }

    /// Config (validation) failures exit with 1, runtime failures with 2.
    pub fn exit_code(&self) -> i32 {
        if self.is_validation() {
            1
        } else {
            2
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn param(name: &'static str, reason: impl Into<String>) -> Self {
        Error::InvalidParameter {
            name,
            reason: reason.into(),
        }
    }

    pub fn config(field: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::Config {
            field: field.into(),
            reason: reason.into(),
        }
    }
}
