use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed MetaImage header {path}: {reason}")]
    Header { path: PathBuf, reason: String },

    #[error("unsupported element type {0}")]
    UnsupportedElementType(String),

    #[error("raw payload size mismatch: header declares {expected} bytes, file holds {actual}")]
    PayloadSize { expected: usize, actual: usize },

    #[error("invalid volume geometry: {0}")]
    Geometry(String),

    #[error("dimension mismatch: {0:?} vs {1:?}")]
    DimMismatch([usize; 3], [usize; 3]),

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("voxel {index:?} lies outside the supported region of a {dims:?} volume")]
    OutOfSupport { index: [usize; 3], dims: [usize; 3] },

    #[error("constant input: {0}")]
    ConstantInput(&'static str),

    #[error("no trachea candidate found on the top slice")]
    NoTracheaCandidate,

    #[error("seed intensity {hu} HU is not air-like (expected < {limit} HU)")]
    SeedNotAir { hu: f32, limit: f32 },

    #[error("region growing produced an empty segmentation at the first iteration")]
    EmptySegmentation,

    #[error("no skeleton junction found; the carina cannot be located")]
    CarinaNotFound,

    #[error("no lung component of plausible size")]
    NoLungComponent,

    #[error("empty mask: {0}")]
    EmptyMask(&'static str),

    #[error("no contrast-filled voxels in the mediastinal box; supply the heart center manually")]
    NoHeartCandidate,

    #[error("undefined metric: {0}")]
    Undefined(&'static str),

    #[error("config error: {0}")]
    Config(String),

    #[error("invalid phantom spec: {0}")]
    Phantom(String),

    #[error("{0}")]
    Csv(String),

    #[error("missing prerequisite artifact {path} (produced by the {stage} stage)")]
    MissingArtifact { path: PathBuf, stage: &'static str },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
