//! Cluster-to-reference alignment and final global optimization.
//!
//! Frame convention: a cluster's local rotations map into the reference
//! frame by right-multiplication, `R_global = R_local * s`, with one
//! alignment rotation `s` per cluster. A shared vertex gives the closed form
//! `s = R_local^-1 * R_ref`; a cross edge `e_{m,p}` (reference side `m`)
//! chains `s = R_p_local^-1 * R_{m,p} * R_m_ref`.

use crate::cds::ReferenceSet;
use crate::cluster::{ClusterId, ClusterState};
use crate::error::{Error, Result};
use crate::graph::{EpipolarGraph, Frame, Registration, VertexId};
use crate::so3::{self, UnitRotation};
use crate::solver::{self, ManifoldProblem, ResidualTerm};
use nalgebra::Matrix4;
use serde::Serialize;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AlignmentSource {
    /// Induced by a vertex common to cluster and reference.
    VertexInduced(VertexId),
    /// Induced by a cross edge; `reference` is the endpoint in the reference.
    EdgeInduced {
        reference: VertexId,
        cluster: VertexId,
    },
}

#[derive(Debug, Clone)]
pub struct AlignmentRotation {
    pub cluster: ClusterId,
    pub s: UnitRotation,
    /// Edge-induced supporters of the winning candidate (at least 1: a
    /// candidate with no supporter counts itself).
    pub support: usize,
    pub source: AlignmentSource,
}

/// One alignment estimate per vertex shared by the cluster frame and the
/// reference.
pub fn vertex_induced_estimates(
    cluster_frame: &Registration,
    reference: &ReferenceSet,
) -> Vec<(VertexId, UnitRotation)> {
    cluster_frame
        .iter()
        .filter_map(|(v, local)| {
            reference
                .rotations
                .get(v)
                .map(|r| (v, local.inverse().compose(r)))
        })
        .collect()
}

/// One alignment estimate per cross edge with one endpoint carrying a
/// reference rotation and the other a cluster-local rotation. Both
/// orientations of an edge can contribute when the endpoint sets overlap.
pub fn edge_induced_estimates(
    g: &EpipolarGraph,
    cluster_frame: &Registration,
    reference: &ReferenceSet,
) -> Vec<((VertexId, VertexId), UnitRotation)> {
    let mut out = Vec::new();
    for e in g.edges() {
        for (m, p) in [(e.i, e.j), (e.j, e.i)] {
            let (Some(r_m_ref), Some(r_p_local)) =
                (reference.rotations.get(m), cluster_frame.get(p))
            else {
                continue;
            };
            let r_mp = e.rot_from(m);
            let s = r_p_local.inverse().compose(&r_mp).compose(r_m_ref);
            out.push(((m, p), s));
        }
    }
    out
}

/// Selects the alignment rotation: vertex-induced candidates first, scored by
/// their edge-induced supporters within `theta_th`, then refined over the
/// supporter constraints with both frames held fixed. Falls back to the
/// best-supported edge-induced estimate when no vertex is shared.
pub fn estimate_cluster_alignment(
    g: &EpipolarGraph,
    cluster: ClusterId,
    cluster_frame: &Registration,
    reference: &ReferenceSet,
    theta_th: f64,
) -> Result<AlignmentRotation> {
    let vertex_est = vertex_induced_estimates(cluster_frame, reference);
    let edge_est = edge_induced_estimates(g, cluster_frame, reference);
    if vertex_est.is_empty() && edge_est.is_empty() {
        return Err(Error::NoAlignmentPath { cluster });
    }
    let cos_half = (theta_th.to_radians() / 2.0).cos();
    let supporters_of = |s: &UnitRotation| -> Vec<usize> {
        edge_est
            .iter()
            .enumerate()
            .filter(|(_, (_, e))| so3::within_angle(s, e, cos_half))
            .map(|(k, _)| k)
            .collect()
    };

    let candidates: Vec<(AlignmentSource, UnitRotation)> = if !vertex_est.is_empty() {
        vertex_est
            .iter()
            .map(|&(v, s)| (AlignmentSource::VertexInduced(v), s))
            .collect()
    } else {
        edge_est
            .iter()
            .map(|&((m, p), s)| (AlignmentSource::EdgeInduced { reference: m, cluster: p }, s))
            .collect()
    };

    // Max supporters wins; enumeration order (ascending vertex, then edge
    // order) settles ties toward the earlier candidate.
    let mut best: Option<(usize, usize)> = None; // (candidate idx, n_supporters)
    for (idx, (_, s)) in candidates.iter().enumerate() {
        let n = supporters_of(s).len();
        let better = match best {
            None => true,
            Some((_, bn)) => n > bn,
        };
        if better {
            best = Some((idx, n));
        }
    }
    let (best_idx, n_sup) = best.unwrap();
    let (source, init) = candidates[best_idx];
    let supporter_idx = supporters_of(&init);

    // Refine over the supporter constraints. Each supporter's estimate is an
    // exact observation of s, so this is a single-rotation least squares.
    let s = if supporter_idx.is_empty() {
        init
    } else {
        let mut p = ManifoldProblem::new();
        let anchor = VertexId(0);
        let var = VertexId(1);
        p.variables.insert(anchor, UnitRotation::IDENTITY);
        p.variables.insert(var, init);
        p.fixed.insert(anchor);
        for &k in &supporter_idx {
            p.terms.push(ResidualTerm {
                i: anchor,
                j: var,
                meas: edge_est[k].1,
            });
        }
        p.max_iterations = 20;
        let (out, _) = solver::solve_best_effort(&p)?;
        out.solution[&var]
    };

    Ok(AlignmentRotation {
        cluster,
        s,
        support: n_sup.max(1),
        source,
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct ClusterAlignStat {
    pub cluster: usize,
    pub common_vertices: usize,
    pub cross_edges: usize,
    pub support: usize,
    pub alignment_angle: f64,
}

#[derive(Debug, Clone, Serialize, Default)]
pub struct AlignStats {
    pub per_cluster: Vec<ClusterAlignStat>,
}

#[derive(Debug, Clone)]
pub struct GlobalResult {
    /// Rotations over the operating component, in the reference frame.
    pub rotations: Registration,
    /// Edge indices classified inlier against the aligned rotations.
    pub inlier_edges: Vec<u32>,
    pub final_cost: f64,
    pub stats: AlignStats,
    pub warnings: Vec<String>,
}

/// Maps every cluster into the reference frame, classifies inliers on the
/// full graph against the aligned rotations, and runs the final global
/// optimization with the reference's gauge vertex fixed (or the whole
/// reference when `freeze_reference` is set). Reference rotations win for
/// vertices present in both a cluster and the reference.
#[allow(clippy::too_many_arguments)]
pub fn global_align_and_optimize(
    g: &EpipolarGraph,
    cluster_state: &ClusterState,
    reference: &ReferenceSet,
    alignments: &[AlignmentRotation],
    reference_gauge: VertexId,
    theta_th: f64,
    freeze_reference: bool,
    global_max_iterations: usize,
) -> Result<GlobalResult> {
    let mut rotations = Registration::new(Frame::Global);
    let mut stats = AlignStats::default();
    for a in alignments {
        let frame = cluster_state.local_frame(a.cluster);
        for (v, local) in frame.iter() {
            rotations.insert(v, local.compose(&a.s));
        }
        stats.per_cluster.push(ClusterAlignStat {
            cluster: a.cluster,
            common_vertices: vertex_induced_estimates(frame, reference).len(),
            cross_edges: edge_induced_estimates(g, frame, reference).len(),
            support: a.support,
            alignment_angle: a.s.angle_radians().to_degrees(),
        });
    }
    for (v, r) in reference.rotations.iter() {
        rotations.insert(v, *r);
    }

    let cos_half = (theta_th.to_radians() / 2.0).cos();
    let mut problem = ManifoldProblem::new();
    for (v, r) in rotations.iter() {
        problem.variables.insert(v, *r);
    }
    if freeze_reference {
        for &v in &reference.members {
            problem.fixed.insert(v);
        }
    } else {
        problem.fixed.insert(reference_gauge);
    }
    let mut inlier_edges = Vec::new();
    let mut aligned_cost = 0.0;
    for (idx, e) in g.edges().iter().enumerate() {
        let (Some(ri), Some(rj)) = (rotations.get(e.i), rotations.get(e.j)) else {
            continue;
        };
        let chained = e.rot.compose(ri);
        if so3::within_angle(&chained, rj, cos_half) {
            inlier_edges.push(idx as u32);
            let d = chained.geodesic_radians(rj);
            aligned_cost += d * d;
            problem.terms.push(ResidualTerm {
                i: e.i,
                j: e.j,
                meas: e.rot,
            });
        }
    }
    problem.max_iterations = global_max_iterations;
    let mut warnings = Vec::new();
    let (final_cost, rotations) = if problem.terms.is_empty() {
        (aligned_cost, rotations)
    } else {
        let (out, converged) = solver::solve_best_effort(&problem)?;
        if !converged {
            warnings.push("final global optimization hit the iteration cap".into());
        }
        let mut reg = Registration::new(Frame::Global);
        for (v, r) in out.solution {
            reg.insert(v, r);
        }
        (out.report.final_cost, reg)
    };
    Ok(GlobalResult {
        rotations,
        inlier_edges,
        final_cost,
        stats,
        warnings,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AverageMode {
    ChordalL2,
    GeodesicL1,
}

/// Single rotation averaging. Chordal L2 is the quaternion eigen-mean;
/// geodesic L1 runs a Weiszfeld iteration on SO(3) initialized at the
/// chordal mean (100 iterations, step tolerance 1e-10).
pub fn single_rotation_average(items: &[UnitRotation], mode: AverageMode) -> UnitRotation {
    assert!(!items.is_empty(), "average of an empty set");
    let chordal = quaternion_eigen_mean(items);
    match mode {
        AverageMode::ChordalL2 => chordal,
        AverageMode::GeodesicL1 => weiszfeld(items, chordal),
    }
}

fn quaternion_eigen_mean(items: &[UnitRotation]) -> UnitRotation {
    let mut m = Matrix4::<f64>::zeros();
    for r in items {
        let [w, x, y, z] = r.wxyz();
        let q = nalgebra::Vector4::new(w, x, y, z);
        m += q * q.transpose();
    }
    let eig = m.symmetric_eigen();
    let mut best = 0;
    for k in 1..4 {
        if eig.eigenvalues[k] > eig.eigenvalues[best] {
            best = k;
        }
    }
    let v = eig.eigenvectors.column(best);
    UnitRotation::from_wxyz(v[0], v[1], v[2], v[3])
}

fn weiszfeld(items: &[UnitRotation], init: UnitRotation) -> UnitRotation {
    let mut current = init;
    for _ in 0..100 {
        let mut num = nalgebra::Vector3::zeros();
        let mut den = 0.0;
        for r in items {
            let rel = current.inverse().compose(r);
            let Ok(t) = rel.log_map() else {
                // Antipodal item: no usable direction this iteration.
                continue;
            };
            let d = t.norm().max(1e-9);
            num += t / d;
            den += 1.0 / d;
        }
        if den == 0.0 {
            break;
        }
        let step = num / den;
        current = current.compose(&UnitRotation::exp_map(&step));
        if step.norm() < 1e-10 {
            break;
        }
    }
    current
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::so3::angular_distance;
    use nalgebra::Vector3;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn v(i: u32) -> VertexId {
        VertexId(i)
    }

    fn rz(deg: f64) -> UnitRotation {
        UnitRotation::about_axis(Vector3::z(), deg)
    }

    fn reference_from(pairs: &[(u32, UnitRotation)]) -> ReferenceSet {
        let mut rotations = Registration::new(Frame::ReferenceLocal);
        let mut members = Vec::new();
        for &(i, r) in pairs {
            rotations.insert(v(i), r);
            members.push(v(i));
        }
        ReferenceSet {
            n_ref: members.len(),
            members,
            rotations,
            connected: true,
            dominating: true,
            e_ref: None,
        }
    }

    #[test]
    fn vertex_induced_identity_and_shift() {
        let mut rng = ChaCha8Rng::seed_from_u64(81);
        let gt: Vec<UnitRotation> =
            (0..4).map(|_| UnitRotation::sample_uniform(&mut rng)).collect();
        let mut local = Registration::new(Frame::ClusterLocal(0));
        for (i, r) in gt.iter().enumerate() {
            local.insert(v(i as u32), *r);
        }
        let reference = reference_from(&[(0, gt[0]), (2, gt[2])]);
        let ests = vertex_induced_estimates(&local, &reference);
        assert_eq!(ests.len(), 2);
        for (_, s) in &ests {
            assert!(angular_distance(s, &UnitRotation::IDENTITY) < 1e-9);
        }

        // Cluster frame pre-rotated by a known gauge: every estimate equals it.
        let shift = UnitRotation::sample_uniform(&mut rng);
        let mut shifted = Registration::new(Frame::ClusterLocal(0));
        for (i, r) in gt.iter().enumerate() {
            shifted.insert(v(i as u32), r.compose(&shift));
        }
        let ests = vertex_induced_estimates(&shifted, &reference);
        for (_, s) in &ests {
            assert!(angular_distance(s, &shift.inverse()) < 1e-9);
        }
    }

    #[test]
    fn vertex_induced_l1_mean_converges_with_noise() {
        let mut rng = ChaCha8Rng::seed_from_u64(82);
        let gt: Vec<UnitRotation> =
            (0..40).map(|_| UnitRotation::sample_uniform(&mut rng)).collect();
        let s_true = UnitRotation::sample_uniform(&mut rng);
        let reference = reference_from(
            &gt.iter()
                .enumerate()
                .map(|(i, r)| (i as u32, *r))
                .collect::<Vec<_>>(),
        );
        let mut errs = Vec::new();
        for noise in [2.0, 0.2, 0.02] {
            let mut local = Registration::new(Frame::ClusterLocal(0));
            for (i, r) in gt.iter().enumerate() {
                let n = UnitRotation::sample_perturbation(&mut rng, noise);
                // local = gt * s_true^-1, so that s estimates recover s_true
                local.insert(v(i as u32), r.compose(&s_true.inverse()).compose(&n));
            }
            let ests: Vec<UnitRotation> = vertex_induced_estimates(&local, &reference)
                .into_iter()
                .map(|(_, s)| s)
                .collect();
            let mean = single_rotation_average(&ests, AverageMode::GeodesicL1);
            errs.push(angular_distance(&mean, &s_true));
        }
        assert!(errs[0] > errs[1] && errs[1] > errs[2], "errs={errs:?}");
        assert!(errs[2] < 0.02);
    }

    /// A consistent two-part instance: vertices 0..3 in the reference,
    /// 3..6 in the cluster (vertex 3 shared), cross edges as listed.
    fn split_instance(
        seed: u64,
    ) -> (
        Vec<UnitRotation>,
        EpipolarGraph,
        Registration,
        ReferenceSet,
        UnitRotation,
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let gt: Vec<UnitRotation> =
            (0..6).map(|_| UnitRotation::sample_uniform(&mut rng)).collect();
        let edges = [
            (0u32, 1u32),
            (0, 2),
            (1, 2),
            (2, 3),
            (1, 3),
            (3, 4),
            (3, 5),
            (4, 5),
            (2, 4), // cross
            (1, 5), // cross
        ];
        let g = EpipolarGraph::from_edges(
            6,
            edges
                .iter()
                .map(|&(i, j)| (i, j, gt[j as usize].compose(&gt[i as usize].inverse()))),
        )
        .unwrap();
        let reference = reference_from(&[(0, gt[0]), (1, gt[1]), (2, gt[2]), (3, gt[3])]);
        let s_true = UnitRotation::sample_uniform(&mut rng);
        let mut local = Registration::new(Frame::ClusterLocal(0));
        for i in 3..6 {
            local.insert(v(i), gt[i as usize].compose(&s_true.inverse()));
        }
        // R_global = R_local * s with local = gt * s_true^-1 makes s_true the
        // expected alignment.
        (gt, g, local, reference, s_true)
    }

    #[test]
    fn edge_induced_consistent_and_outlier() {
        let (_gt, g, local, reference, s_expected) = split_instance(83);
        let edges = edge_induced_estimates(&g, &local, &reference);
        // Cross pairs (m in reference, p in cluster): (2,3),(1,3),(2,4),(1,5)
        // plus reference-side orientations of edges out of the shared vertex.
        assert!(!edges.is_empty());
        let verts = vertex_induced_estimates(&local, &reference);
        assert_eq!(verts.len(), 1);
        for ((_, _), s) in &edges {
            assert!(angular_distance(s, &verts[0].1) < 1e-9);
            assert!(angular_distance(s, &s_expected) < 1e-9);
        }

        // No cross edges at all.
        let tiny = EpipolarGraph::from_edges(6, [(4u32, 5u32, UnitRotation::IDENTITY)]).unwrap();
        let mut only_cluster = Registration::new(Frame::ClusterLocal(0));
        only_cluster.insert(v(4), UnitRotation::IDENTITY);
        only_cluster.insert(v(5), UnitRotation::IDENTITY);
        let ref_disjoint = reference_from(&[(0, UnitRotation::IDENTITY)]);
        assert!(edge_induced_estimates(&tiny, &only_cluster, &ref_disjoint).is_empty());
    }

    #[test]
    fn alignment_estimation_prefers_supported_vertex() {
        let (_gt, g, local, reference, s_expected) = split_instance(84);
        let a = estimate_cluster_alignment(&g, 0, &local, &reference, 3.0).unwrap();
        assert!(angular_distance(&a.s, &s_expected) < 1e-8);
        assert!(matches!(a.source, AlignmentSource::VertexInduced(_)));
        assert!(a.support >= 4);

        // Corrupt the shared vertex's local rotation by 20 degrees, and add a
        // second shared vertex that stays exact: the exact one wins on
        // supporter count.
        let (_gt2, g2, mut local2, mut reference2, s_expected2) = split_instance(85);
        let r4 = *local2.get(v(4)).unwrap();
        reference2.rotations.insert(
            v(4),
            r4.compose(&s_expected2),
        );
        reference2.members.push(v(4));
        reference2.members.sort();
        let r3 = *local2.get(v(3)).unwrap();
        local2.insert(v(3), r3.compose(&rz(20.0)));
        let a = estimate_cluster_alignment(&g2, 0, &local2, &reference2, 3.0).unwrap();
        assert_eq!(a.source, AlignmentSource::VertexInduced(v(4)));
        assert!(angular_distance(&a.s, &s_expected2) < 1e-6);
    }

    #[test]
    fn alignment_single_common_vertex_no_cross_edges() {
        let g = EpipolarGraph::from_edges(3, [(1u32, 2u32, UnitRotation::IDENTITY)]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(86);
        let s_true = UnitRotation::sample_uniform(&mut rng);
        let mut local = Registration::new(Frame::ClusterLocal(0));
        let r1 = UnitRotation::sample_uniform(&mut rng);
        local.insert(v(1), r1);
        local.insert(v(2), UnitRotation::sample_uniform(&mut rng));
        let reference = reference_from(&[(0, UnitRotation::IDENTITY), (1, r1.compose(&s_true))]);
        // Reference vertex 0 shares no edge with the cluster; only the common
        // vertex 1 induces an estimate.
        let a = estimate_cluster_alignment(&g, 0, &local, &reference, 3.0).unwrap();
        assert_eq!(a.support, 1);
        assert!(angular_distance(&a.s, &s_true) < 1e-9);
    }

    #[test]
    fn average_trivial_and_symmetry() {
        let mut rng = ChaCha8Rng::seed_from_u64(87);
        let r = UnitRotation::sample_uniform(&mut rng);
        for mode in [AverageMode::ChordalL2, AverageMode::GeodesicL1] {
            let out = single_rotation_average(&[r, r, r], mode);
            assert!(angular_distance(&out, &r) < 1e-9);
        }
        let out = single_rotation_average(&[rz(10.0), rz(-10.0)], AverageMode::ChordalL2);
        assert!(angular_distance(&out, &UnitRotation::IDENTITY) < 1e-9);
    }

    #[test]
    fn geodesic_l1_matches_coaxial_grid_oracle() {
        // Nine copies of the identity and one 120-degree outlier. The L1
        // minimizer over the z-axis (all items coaxial) is found by a dense
        // 1-D grid scan, independent of the Weiszfeld path.
        let mut items = vec![UnitRotation::IDENTITY; 9];
        items.push(rz(120.0));
        let mut best = (f64::INFINITY, 0.0f64);
        let mut phi = -10.0f64;
        while phi <= 130.0 {
            let cost: f64 = items
                .iter()
                .map(|r| angular_distance(&rz(phi), r))
                .sum();
            if cost < best.0 {
                best = (cost, phi);
            }
            phi += 0.0005;
        }
        assert!(best.1.abs() < 1e-3, "grid argmin at {}", best.1);
        let l1 = single_rotation_average(&items, AverageMode::GeodesicL1);
        assert!(angular_distance(&l1, &rz(best.1)) < 1e-3);
        // The chordal mean is visibly pulled toward the outlier.
        let l2 = single_rotation_average(&items, AverageMode::ChordalL2);
        assert!(angular_distance(&l2, &UnitRotation::IDENTITY) > 3.0);
    }
}
