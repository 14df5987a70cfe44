use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error("face {face}: vertex index {index} out of range (mesh has {n_vertices} vertices)")]
    IndexOutOfRange {
        face: usize,
        index: i64,
        n_vertices: usize,
    },

    #[error("face {face} is degenerate (area {area:e})")]
    DegenerateFace { face: usize, area: f64 },

    #[error("face {face} is not a triangle ({arity} vertices)")]
    NonTriangleFace { face: usize, arity: usize },

    #[error("edge ({0}, {1}) is shared by more than two faces")]
    NonManifoldEdge(usize, usize),

    #[error("vertex {0} is isolated (no incident faces)")]
    IsolatedVertex(usize),

    #[error("vertex {vertex} has {count} neighbours, at least 2 are required")]
    TooFewNeighbours { vertex: usize, count: usize },

    #[error("eigensolver did not converge: {0}")]
    Eigensolver(String),

    #[error("rotation angle {angle} is at the logarithm branch cut (pi)")]
    BranchCut { angle: f64 },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("no visible keypoints")]
    NoVisibleKeypoints,

    #[error("instance {id}: only {visible} visible keypoints remain (need at least 3)")]
    TooFewVisible { id: String, visible: usize },

    #[error("non-finite gradient in tensor `{0}`")]
    NonFiniteGradient(String),

    #[error("training diverged at epoch {epoch}: loss is not finite")]
    Diverged { epoch: usize },

    #[error("degenerate point configuration: {0}")]
    Degenerate(String),

    #[error("could not sample a pose with visible keypoints after {0} attempts")]
    SamplingFailed(usize),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Stable machine-readable code, used by the CLI's error line.
    pub fn code(&self) -> &'static str {
        match self {
            Error::Io { .. } => "E_IO",
            Error::Parse { .. } => "E_PARSE",
            Error::IndexOutOfRange { .. } => "E_INDEX",
            Error::DegenerateFace { .. } => "E_DEGENERATE_FACE",
            Error::NonTriangleFace { .. } => "E_NON_TRIANGLE",
            Error::NonManifoldEdge(..) => "E_NON_MANIFOLD",
            Error::IsolatedVertex(_) => "E_ISOLATED_VERTEX",
            Error::TooFewNeighbours { .. } => "E_NEIGHBOURS",
            Error::Eigensolver(_) => "E_EIGEN",
            Error::BranchCut { .. } => "E_BRANCH_CUT",
            Error::Shape(_) => "E_SHAPE",
            Error::InvalidArgument(_) => "E_INVALID_ARGUMENT",
            Error::NoVisibleKeypoints => "E_NO_VISIBLE",
            Error::TooFewVisible { .. } => "E_TOO_FEW_VISIBLE",
            Error::NonFiniteGradient(_) => "E_NONFINITE_GRAD",
            Error::Diverged { .. } => "E_DIVERGED",
            Error::Degenerate(_) => "E_DEGENERATE",
            Error::SamplingFailed(_) => "E_SAMPLING",
            Error::Json(_) => "E_JSON",
        }
    }
}
