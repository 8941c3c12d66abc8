//! Rotation averaging on epipolar graphs.
//!
//! Estimates absolute camera orientations from noisy, outlier-contaminated
//! pairwise relative rotations. The toolkit provides the incremental
//! estimation engine, connected-dominating-set alignment references, a
//! cluster-then-align pipeline, a Levenberg-Marquardt solver over products of
//! SO(3), plus synthetic benchmark generation and evaluation metrics.

pub mod align;
pub mod cds;
pub mod cluster;
pub mod engine;
pub mod error;
pub mod eval;
pub mod graph;
pub mod pipeline;
pub mod so3;
pub mod solver;
pub mod synth;

pub use error::{Error, Result};
pub use graph::{EpipolarGraph, Frame, Registration, Triplet, VertexId};
pub use so3::{angular_distance, AxisAngle, UnitRotation};
