//! Crate-wide error type.

use crate::solver::SolveOutcome;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// The rotation angle is within the ambiguity band around pi where the
    /// logarithm's axis is not determined by the data.
    #[error("rotation angle within 1e-6 of pi; logarithm axis ambiguous")]
    NearPiAmbiguity,

    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error("duplicate edge ({i}, {j}) at line {line}")]
    DuplicateEdge { i: u32, j: u32, line: usize },

    #[error("quaternion at line {line} has norm {norm:.6}, deviating more than 1e-3 from unit")]
    NonUnitQuaternion { line: usize, norm: f64 },

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    /// The solver ran out of iterations or damping range. The best iterate
    /// and its report are still available in the payload.
    #[error("solver did not converge after {} iterations (final cost {:.3e})",
            .0.report.iterations, .0.report.final_cost)]
    DidNotConverge(Box<SolveOutcome>),

    #[error("no triplet passes the chaining check; cannot seed")]
    NoValidSeed,

    #[error("no candidate with an edge into the selected set")]
    EmptyFrontier,

    #[error("unregistered vertices remain but none has an edge into any registered set")]
    Stalled,

    #[error("graph with {n} vertices exceeds the exhaustive-search limit of {limit}")]
    TooLarge { n: usize, limit: usize },

    #[error("cluster {cluster} shares no vertex and no edge with the reference")]
    NoAlignmentPath { cluster: usize },

    #[error("estimate and ground truth share no vertices")]
    EmptyIntersection,

    #[error("invalid configuration: {0}")]
    BadConfig(String),
}

impl Error {
    /// Stable machine-readable kind for report JSON and exit-code mapping.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::NearPiAmbiguity => "near_pi",
            Error::Parse { .. } => "parse",
            Error::DuplicateEdge { .. } => "duplicate_edge",
            Error::NonUnitQuaternion { .. } => "non_unit_quaternion",
            Error::Io(_) => "io",
            Error::DidNotConverge(_) => "did_not_converge",
            Error::NoValidSeed => "no_valid_seed",
            Error::EmptyFrontier => "empty_frontier",
            Error::Stalled => "stalled",
            Error::TooLarge { .. } => "too_large",
            Error::NoAlignmentPath { .. } => "no_alignment_path",
            Error::EmptyIntersection => "empty_intersection",
            Error::BadConfig(_) => "config",
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
