use std::path::PathBuf;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch: expected {expected:?}, got {got:?}")]
    ShapeMismatch { expected: Vec<usize>, got: Vec<usize> },

    #[error("index {index} out of range (len {len})")]
    IndexOutOfRange { index: usize, len: usize },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("volume dims {0:?} below the minimum (16, 64, 64)")]
    DimsTooSmall((usize, usize, usize)),

    #[error("target fraction bound {bound} infeasible: minimum ellipsoid volume fraction is {min_fraction}")]
    InfeasibleTargetFraction { bound: f64, min_fraction: f64 },

    #[error("bad magic: expected {expected:?}, got {got:?}")]
    BadMagic { expected: [u8; 4], got: [u8; 4] },

    #[error("unsupported format version {0}")]
    BadVersion(u32),

    #[error("truncated payload: need {need} bytes, got {got}")]
    Truncated { need: usize, got: usize },

    #[error("dtype tag {0} does not match the requested volume kind")]
    DtypeMismatch(u8),

    #[error("checkpoint incompatible with config: {0}")]
    CheckpointMismatch(String),

    #[error("non-finite {component} loss at step {step}")]
    NonFiniteLoss { component: &'static str, step: u64 },

    #[error("empty {0}")]
    Empty(&'static str),

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("config parse error: {0}")]
    Config(#[from] serde_json::Error),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }
}
