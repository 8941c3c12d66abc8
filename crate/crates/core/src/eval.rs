//! Evaluation: gauge-aligned median rotation error, graph statistics,
//! reference accuracy, and outlier-classification scores.
//!
//! All comparisons run over the intersection of the estimate's and the
//! ground truth's vertex sets.

use crate::align::{single_rotation_average, AverageMode};
use crate::cds::ReferenceSet;
use crate::error::{Error, Result};
use crate::graph::{EpipolarGraph, Registration, VertexId};
use crate::so3::{self, UnitRotation};

#[derive(Debug, Clone)]
pub struct EvalReport {
    pub n_common: usize,
    pub median_error: f64,
    pub mean_error: f64,
    /// The best relative rotation mapping the estimate onto the ground truth
    /// (applied on the right).
    pub alignment: UnitRotation,
    pub per_vertex_errors: Vec<(VertexId, f64)>,
}

/// Midpoint median; the input is consumed and sorted.
pub(crate) fn median(mut xs: Vec<f64>) -> f64 {
    assert!(!xs.is_empty());
    xs.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = xs.len();
    if n % 2 == 1 {
        xs[n / 2]
    } else {
        0.5 * (xs[n / 2 - 1] + xs[n / 2])
    }
}

/// Estimates the gauge between the two registrations (geodesic L1 over the
/// per-vertex candidates by default) and scores per-vertex angular errors in
/// degrees over the common vertices.
pub fn align_and_score_with(
    est: &Registration,
    gt: &Registration,
    mode: AverageMode,
) -> Result<EvalReport> {
    let common: Vec<VertexId> = est.vertices().filter(|&v| gt.contains(v)).collect();
    if common.is_empty() {
        return Err(Error::EmptyIntersection);
    }
    let candidates: Vec<UnitRotation> = common
        .iter()
        .map(|&v| est.get(v).unwrap().inverse().compose(gt.get(v).unwrap()))
        .collect();
    let alignment = single_rotation_average(&candidates, mode);
    let per_vertex_errors: Vec<(VertexId, f64)> = common
        .iter()
        .map(|&v| {
            let aligned = est.get(v).unwrap().compose(&alignment);
            (v, so3::angular_distance(&aligned, gt.get(v).unwrap()))
        })
        .collect();
    let errs: Vec<f64> = per_vertex_errors.iter().map(|&(_, e)| e).collect();
    let mean_error = errs.iter().sum::<f64>() / errs.len() as f64;
    Ok(EvalReport {
        n_common: common.len(),
        median_error: median(errs),
        mean_error,
        alignment,
        per_vertex_errors,
    })
}

pub fn align_and_score(est: &Registration, gt: &Registration) -> Result<EvalReport> {
    align_and_score_with(est, gt, AverageMode::GeodesicL1)
}

#[derive(Debug, Clone)]
pub struct GraphStats {
    pub n_v: usize,
    /// Vertices of the graph that also carry a ground-truth rotation.
    pub n_v_star: usize,
    pub n_e: usize,
    pub median_rel_err: Option<f64>,
    pub mean_rel_err: Option<f64>,
}

/// Vertex/edge counts plus, when ground truth is given, the per-edge relative
/// rotation errors over edges with both endpoints in the ground truth.
pub fn graph_stats(g: &EpipolarGraph, gt: Option<&Registration>) -> GraphStats {
    let mut stats = GraphStats {
        n_v: g.n_vertices(),
        n_v_star: 0,
        n_e: g.n_edges(),
        median_rel_err: None,
        mean_rel_err: None,
    };
    let Some(gt) = gt else {
        return stats;
    };
    stats.n_v_star = g.vertices().filter(|&v| gt.contains(v)).count();
    let mut errs = Vec::new();
    for e in g.edges() {
        let (Some(ri), Some(rj)) = (gt.get(e.i), gt.get(e.j)) else {
            continue;
        };
        let rel = rj.compose(&ri.inverse());
        errs.push(so3::angular_distance(&e.rot, &rel));
    }
    if !errs.is_empty() {
        stats.mean_rel_err = Some(errs.iter().sum::<f64>() / errs.len() as f64);
        stats.median_rel_err = Some(median(errs));
    }
    stats
}

/// Median alignment error of the reference's rotations against ground truth.
pub fn reference_accuracy(reference: &ReferenceSet, gt: &Registration) -> Result<f64> {
    Ok(align_and_score(&reference.rotations, gt)?.median_error)
}

#[derive(Debug, Clone, Copy)]
pub struct OutlierScores {
    /// Precision of the predicted-outlier set against the injected labels.
    pub precision: f64,
    /// Recall of the predicted-outlier set against the injected labels.
    pub recall: f64,
    /// Fraction of edges classified inlier that are not injected outliers.
    pub inlier_purity: f64,
    pub n_predicted_outliers: usize,
    pub n_injected_outliers: usize,
}

/// Scores the inlier/outlier classification (predicted outliers are the
/// complement of `inlier_edges`) against per-edge injection labels.
pub fn outlier_scores(inlier_edges: &[u32], labels: &[bool]) -> OutlierScores {
    let mut is_inlier = vec![false; labels.len()];
    for &e in inlier_edges {
        is_inlier[e as usize] = true;
    }
    let mut tp = 0usize; // predicted outlier, injected
    let mut fp = 0usize; // predicted outlier, clean
    let mut fn_ = 0usize; // predicted inlier, injected
    let mut tn = 0usize; // predicted inlier, clean
    for (inl, &injected) in is_inlier.iter().zip(labels) {
        match (*inl, injected) {
            (false, true) => tp += 1,
            (false, false) => fp += 1,
            (true, true) => fn_ += 1,
            (true, false) => tn += 1,
        }
    }
    let n_predicted = tp + fp;
    let n_injected = tp + fn_;
    let n_inliers = tn + fn_;
    OutlierScores {
        precision: if n_predicted == 0 {
            1.0
        } else {
            tp as f64 / n_predicted as f64
        },
        recall: if n_injected == 0 {
            1.0
        } else {
            tp as f64 / n_injected as f64
        },
        inlier_purity: if n_inliers == 0 {
            1.0
        } else {
            tn as f64 / n_inliers as f64
        },
        n_predicted_outliers: n_predicted,
        n_injected_outliers: n_injected,
    }
}

/// Per-edge geometric labels: true where the measurement deviates from the
/// ground-truth relative rotation by more than `threshold_deg`. Lets the
/// scores above be re-run against deviation rather than injection.
pub fn geometric_labels(g: &EpipolarGraph, gt: &Registration, threshold_deg: f64) -> Vec<bool> {
    g.edges()
        .iter()
        .map(|e| match (gt.get(e.i), gt.get(e.j)) {
            (Some(ri), Some(rj)) => {
                let rel = rj.compose(&ri.inverse());
                so3::angular_distance(&e.rot, &rel) > threshold_deg
            }
            _ => false,
        })
        .collect()
}
