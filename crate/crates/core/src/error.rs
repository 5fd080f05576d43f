use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Errors raised by the registration engine.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid coordinate {0:?}: all components must be finite")]
    InvalidCoordinate([f64; 3]),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },

    #[error("invalid grid: {0}")]
    InvalidGrid(String),

    #[error("invalid sampling step {0}: must be at least 1")]
    InvalidStep(usize),

    #[error("degenerate matches: {0}")]
    DegenerateMatches(String),

    #[error("affine linear block is singular (det = {0:e})")]
    SingularAffine(f64),

    #[error("match set is empty")]
    EmptyMatchSet,

    #[error("numerical divergence: {0}")]
    NumericalDivergence(String),

    #[error("no overlapping unmasked voxels")]
    EmptyOverlap,

    #[error("intensity volume has zero variance")]
    DegenerateIntensity,

    #[error("point lists cannot be paired: {0} moving vs {1} fixed")]
    PairingError(usize, usize),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("{}: not a VOL1 container", .0.display())]
    NotVol1(PathBuf),

    #[error("malformed match file: {0}")]
    MalformedMatches(String),

    #[error("corrupt container: {0}")]
    CorruptContainer(String),

    #[error("stage `{stage}` failed: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<Error>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn in_stage(self, stage: &'static str) -> Error {
        Error::Stage {
            stage,
            source: Box::new(self),
        }
    }

    /// The innermost error, looking through stage wrappers.
    pub fn root(&self) -> &Error {
        match self {
            Error::Stage { source, .. } => source.root(),
            other => other,
        }
    }

    /// Process exit code used by the command line tool.
    ///
    /// 2 is reserved for usage errors, which are reported by the argument
    /// parser before any of these can occur.
    pub fn exit_code(&self) -> i32 {
        match self.root() {
            Error::NumericalDivergence(_) => 4,
            Error::Config(_) => 2,
            _ => 3,
        }
    }
}
