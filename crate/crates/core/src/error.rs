use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("malformed header: {0}")]
    MalformedHeader(String),
    #[error("payload size mismatch: header implies {expected} bytes, found {found}")]
    PayloadSizeMismatch { expected: usize, found: usize },
    #[error("unsupported dtype code {0}")]
    UnsupportedDtype(i16),
    #[error("i/o failure on {path}")]
    IoFailure {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("volume is constant (min == max == {0})")]
    ConstantVolume(f32),
    #[error("volume contains non-finite values")]
    NonFiniteVolume,
    #[error("invalid phantom spec: {0}")]
    InvalidSpec(String),
    #[error("duplicate subject id {0:?}")]
    DuplicateSubject(String),
    #[error("patch size {patch} exceeds volume dimension {dim}")]
    PatchTooLarge { patch: usize, dim: usize },
    #[error("patch grid mismatch: {0}")]
    GridMismatch(String),
    #[error("dimension {0} is odd; the wavelet transform needs even sizes")]
    OddDimension(usize),
    #[error("wavelet band shape mismatch: {0}")]
    BandShapeMismatch(String),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("input values outside [-1, 1]")]
    InvalidRange,
    #[error("volume too small for a {window}-voxel window: {dims:?}")]
    VolumeTooSmall { window: usize, dims: [usize; 3] },
    #[error("non-finite loss at step {step}: {detail}")]
    NonFiniteLoss { step: u64, detail: String },
    #[error("manifest mismatch: {0}")]
    ManifestMismatch(String),
    #[error("checkpoint mismatch: {0}")]
    CheckpointMismatch(String),
    #[error("empty cohort")]
    EmptyCohort,
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::IoFailure {
            path: path.into(),
            source,
        }
    }
}
