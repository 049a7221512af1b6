use std::path::PathBuf;

use thiserror::Error;

/// Errors raised by the deformation engine.
#[derive(Debug, Error)]
pub enum Error {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("parse error: {0}")]
    Parse(String),
    #[error("non-tet element: type {kind} (element {element})")]
    NonTetElement { element: usize, kind: u32 },
    #[error("degenerate tet {tet}: volume {volume:e}")]
    DegenerateTet { tet: usize, volume: f64 },
    #[error("empty mesh")]
    EmptyMesh,
    #[error("invalid mesh: {0}")]
    InvalidMesh(String),
    #[error("not a surface node: {0}")]
    NotSurfaceNode(usize),
    #[error("degenerate surface patch at node {0}")]
    DegenerateSurface(usize),
    #[error("invalid parameter: {0}")]
    InvalidParam(String),
    #[error("singular system: {0}")]
    SingularSystem(String),
    #[error("index {index} out of range (len {len})")]
    IndexOutOfRange { index: usize, len: usize },
    #[error("solver did not converge: {0}")]
    NoConvergence(String),
    #[error("inverted element {tet}: det F = {det:e}")]
    InvertedElement { tet: usize, det: f64 },
    #[error("empty candidate set: {0}")]
    EmptyCandidates(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("dataset error: {0}")]
    Dataset(String),
    #[error("mesh mismatch: manifest hash {expected}, found {found}")]
    MeshMismatch { expected: String, found: String },
    #[error("truncated record {index}: {detail}")]
    TruncatedRecord { index: usize, detail: String },
    #[error("format version mismatch: expected {expected}, found {found}")]
    VersionMismatch { expected: u32, found: u32 },
    #[error("non-finite loss at epoch {epoch}, step {step}")]
    NonFiniteLoss { epoch: usize, step: usize },
    #[error("grasp arity mismatch: model trained for {expected}, got {found}")]
    ArityMismatch { expected: usize, found: usize },
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
