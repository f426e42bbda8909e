use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid pose: {0}")]
    InvalidPose(String),

    #[error("invalid box: {0}")]
    InvalidBox(String),

    #[error("invalid point cloud: {0}")]
    InvalidCloud(String),

    #[error("tuple arity mismatch: {0}")]
    ArityMismatch(String),

    #[error("degenerate elevation: all points lie at the sensor origin")]
    DegenerateElevation,

    #[error("point cloud has no beam indices")]
    MissingBeams,

    #[error("invalid parameter: {0}")]
    Parameter(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("degenerate target: {0}")]
    DegenerateTarget(String),

    #[error("average precision is undefined without ground-truth boxes")]
    UndefinedAp,

    #[error("clean AP must be positive to compute a corruption error (got {0})")]
    ZeroCleanAp(f64),

    #[error("format error in {path}: {msg}")]
    Format { path: PathBuf, msg: String },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("manifest error: {0}")]
    Manifest(String),

    #[error("frame {frame_id}: {source}")]
    Frame {
        frame_id: u64,
        #[source]
        source: Box<Error>,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn format(path: impl Into<PathBuf>, msg: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            msg: msg.into(),
        }
    }

    pub(crate) fn in_frame(self, frame_id: u64) -> Self {
        match self {
            e @ Error::Frame { .. } => e,
            other => Error::Frame {
                frame_id,
                source: Box::new(other),
            },
        }
    }
}
