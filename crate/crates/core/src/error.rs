use std::path::PathBuf;

/// Errors produced anywhere in the pipeline.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("degenerate rotation: normalization denominator {0:e} below 1e-8")]
    DegenerateRotation(f64),
    #[error("matrix is not a proper rotation (orthonormality residual {0:e})")]
    NotARotation(f64),
    #[error("sequence too short: need at least {needed} frames, got {got}")]
    SequenceTooShort { needed: usize, got: usize },
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("attention context is empty")]
    EmptyContext,
    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("invalid diffusion step count T={0}")]
    BadT(usize),
    #[error("diffusion step {step} out of range 0..={max}")]
    StepOutOfRange { step: usize, max: usize },
    #[error("{len} frames cannot be split into {parts} equal slices")]
    NotDivisible { len: usize, parts: usize },
    #[error("invalid chunk length: {0}")]
    BadChunkLength(String),
    #[error("audio too short: need {needed} samples, got {got}")]
    AudioTooShort { needed: usize, got: usize },
    #[error("invalid sample rate {0}")]
    BadSampleRate(u32),
    #[error("probability {0} outside [0, 1]")]
    BadProbability(f64),
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("invalid specification: {0}")]
    BadSpec(String),
    #[error("need at least two items, got {0}")]
    NeedTwoItems(usize),
    #[error("no music beats")]
    NoMusicBeats,
    #[error("no kinematic beats found in the motion")]
    NoMotionBeats,
    #[error("dimension mismatch: {0} vs {1}")]
    DimMismatch(usize, usize),
    #[error("matrix is not positive semidefinite (eigenvalue {0:e})")]
    NonPsd(f64),
    #[error("edit mask out of range: {0}")]
    MaskOutOfRange(String),
    #[error("features too short: need {needed} frames, got {got}")]
    FeatureTooShort { needed: usize, got: usize },
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("non-finite value in {0}")]
    NumericFailure(String),
    #[error("{path}: bad magic bytes {found:?}, expected {expected:?}")]
    BadMagic {
        path: PathBuf,
        expected: String,
        found: String,
    },
    #[error("{path}: unsupported format version {version}")]
    UnsupportedVersion { path: PathBuf, version: u32 },
    #[error("{path}: {message}")]
    Format { path: PathBuf, message: String },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn format(path: impl Into<PathBuf>, message: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            message: message.into(),
        }
    }

    /// True for errors caused by bad user input rather than the environment.
    pub fn is_validation(&self) -> bool {
        !matches!(
            self,
            Error::Io { .. } | Error::NumericFailure(_) | Error::DegenerateRotation(_)
        )
    }
}
