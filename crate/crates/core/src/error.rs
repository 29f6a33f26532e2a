use std::path::PathBuf;

use crate::orbital_opt::OrbitalOptResult;
use crate::spa::SpaAngles;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("rotation angle {angle} is within {gap:e} of pi; no principal real logarithm")]
    BranchBoundary { angle: f64, gap: f64 },

    #[error("overlap matrix is nearly singular (smallest eigenvalue {0:e}); atoms too close?")]
    NearLinearDependence(f64),

    #[error("invalid geometry: {0}")]
    InvalidGeometry(String),

    #[error("theta optimization did not converge (gradient norm {grad_norm:e})")]
    ThetaConvergence {
        best: SpaAngles,
        energy: f64,
        grad_norm: f64,
    },

    #[error("orbital optimization did not converge after {} outer iterations", .0.outer_iterations)]
    OrbitalConvergence(Box<OrbitalOptResult>),

    #[error("geometry sampling failed: {0}")]
    SamplingFailure(String),

    #[error("degenerate edge ({0}, {1}): atoms coincide")]
    DegenerateEdge(usize, usize),

    #[error("non-finite loss on record {record}")]
    NumericalFailure { record: usize },

    #[error("schema error: {0}")]
    Schema(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}:{line}: {source}")]
    Json {
        path: PathBuf,
        line: usize,
        #[source]
        source: serde_json::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidInput(msg.into())
    }
}
