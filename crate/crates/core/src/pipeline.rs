//! Rotation-averaging strategies behind a common trait, registered by name
//! and selected at runtime.
//!
//! Every strategy consumes the largest connected component of the input and
//! reports the vertices it excluded rather than estimating them: rotation
//! averaging is gauge-undetermined across components.

use crate::align;
use crate::cds::{self, ReferenceSet};
use crate::cluster;
use crate::engine::{self, EngineConfig, TraceRecord};
use crate::error::{Error, Result};
use crate::graph::{EpipolarGraph, Frame, Registration, VertexId};
use crate::so3::{self, UnitRotation};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde_json::json;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ClusterCount {
    Auto,
    Fixed(usize),
}

#[derive(Debug, Clone)]
pub struct RunConfig {
    pub theta_th: f64,
    pub global_rate: f64,
    pub clusters: ClusterCount,
    pub rng_seed: u64,
    pub freeze_reference: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            theta_th: 3.0,
            global_rate: 0.05,
            clusters: ClusterCount::Auto,
            rng_seed: 0,
            freeze_reference: false,
        }
    }
}

impl RunConfig {
    pub fn engine(&self) -> EngineConfig {
        EngineConfig {
            theta_th: self.theta_th,
            global_rate: self.global_rate,
            ..EngineConfig::default()
        }
    }
}

#[derive(Debug, Clone)]
pub struct PipelineResult {
    /// Estimated rotations over the operating component.
    pub rotations: Registration,
    /// Endpoint pairs `(i, j)` of the edges classified inlier by the final
    /// optimization (or classification, for non-optimizing baselines).
    pub inlier_pairs: Vec<(u32, u32)>,
    pub final_cost: f64,
    /// Vertices outside the largest connected component, not estimated.
    pub excluded_vertices: Vec<u32>,
    /// Mode-specific report payload.
    pub details: serde_json::Value,
    /// Named engine traces (per cluster / reference construction).
    pub traces: Vec<(String, Vec<TraceRecord>)>,
    pub warnings: Vec<String>,
}

impl PipelineResult {
    /// Maps the inlier pairs back to edge indices of the given graph.
    pub fn inlier_edge_indices(&self, g: &EpipolarGraph) -> Vec<u32> {
        self.inlier_pairs
            .iter()
            .filter_map(|&(i, j)| g.edge_index(VertexId(i), VertexId(j)))
            .collect()
    }
}

/// One interchangeable rotation-averaging strategy.
pub trait Pipeline: Sync + Send {
    fn name(&self) -> &'static str;
    fn run(&self, g: &EpipolarGraph, cfg: &RunConfig) -> Result<PipelineResult>;
}

/// All registered strategies.
pub fn registry() -> Vec<Box<dyn Pipeline>> {
    vec![
        Box::new(Ira),
        Box::new(Irav4),
        Box::new(Irav3PlusRef),
        Box::new(SpanningTree),
    ]
}

pub fn by_name(name: &str) -> Option<Box<dyn Pipeline>> {
    registry().into_iter().find(|p| p.name() == name)
}

pub fn names() -> Vec<&'static str> {
    registry().iter().map(|p| p.name()).collect()
}

/// Restricts to the largest component; returns the restricted graph and the
/// excluded vertices (other components and isolated vertices).
fn operating_subgraph(g: &EpipolarGraph) -> (EpipolarGraph, Vec<u32>) {
    let keep = g.largest_component();
    let mut in_keep = vec![false; g.n_vertices()];
    for &v in &keep {
        in_keep[v.idx()] = true;
    }
    let excluded: Vec<u32> = (0..g.n_vertices() as u32)
        .filter(|&v| !in_keep[v as usize])
        .collect();
    if excluded.is_empty() {
        (g.clone(), excluded)
    } else {
        (g.restrict_to(&keep), excluded)
    }
}

fn pairs_of(g: &EpipolarGraph, edge_indices: &[u32]) -> Vec<(u32, u32)> {
    edge_indices
        .iter()
        .map(|&idx| {
            let e = g.edge(idx);
            (e.i.0, e.j.0)
        })
        .collect()
}

// ---------------------------------------------------------------------------
// Plain incremental averaging to exhaustion.
// ---------------------------------------------------------------------------

pub struct Ira;

impl Pipeline for Ira {
    fn name(&self) -> &'static str {
        "ira"
    }

    fn run(&self, g: &EpipolarGraph, cfg: &RunConfig) -> Result<PipelineResult> {
        let (sub, excluded) = operating_subgraph(g);
        let out = engine::run_incremental(
            &sub,
            &cfg.engine(),
            Frame::Global,
            |_, _| true,
            |st| st.remaining.is_empty(),
        )?;
        Ok(PipelineResult {
            inlier_pairs: pairs_of(&sub, &out.inlier_edges),
            final_cost: out.final_cost,
            excluded_vertices: excluded,
            details: json!({
                "seed": [out.seed.i.0, out.seed.j.0, out.seed.k.0],
                "n_registered": out.registration.len(),
            }),
            traces: vec![("ira".into(), out.trace)],
            warnings: out.warnings,
            rotations: out.registration,
        })
    }
}

// ---------------------------------------------------------------------------
// Cluster growth aligned to the task-specific CDS reference.
// ---------------------------------------------------------------------------

pub struct Irav4;

fn seeds_for(
    sub: &EpipolarGraph,
    cfg: &RunConfig,
    ecfg: &EngineConfig,
) -> Result<Vec<engine::SeedResult>> {
    match cfg.clusters {
        ClusterCount::Fixed(1) => Ok(vec![engine::select_seed(sub, ecfg)?]),
        _ => {
            let mut cs = cluster::community_seeds(sub, ecfg)?;
            if let ClusterCount::Fixed(k) = cfg.clusters {
                cs.seeds.truncate(k.max(1));
            }
            Ok(cs.seeds)
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn run_with_reference(
    sub: &EpipolarGraph,
    cfg: &RunConfig,
    reference: ReferenceSet,
    reference_gauge: VertexId,
    mut traces: Vec<(String, Vec<TraceRecord>)>,
    mut warnings: Vec<String>,
    excluded: Vec<u32>,
    mode_details: serde_json::Value,
) -> Result<PipelineResult> {
    let ecfg = cfg.engine();
    let seeds = seeds_for(sub, cfg, &ecfg)?;
    let state = cluster::grow_clusters(sub, &seeds, &ecfg)?;
    for (c, ctx) in state.clusters.iter().enumerate() {
        traces.push((format!("cluster-{c}"), ctx.trace.clone()));
        warnings.extend(ctx.warnings.iter().cloned());
    }
    let mut alignments = Vec::with_capacity(state.n_clusters());
    for c in 0..state.n_clusters() {
        alignments.push(align::estimate_cluster_alignment(
            sub,
            c,
            state.local_frame(c),
            &reference,
            cfg.theta_th,
        )?);
    }
    let result = align::global_align_and_optimize(
        sub,
        &state,
        &reference,
        &alignments,
        reference_gauge,
        cfg.theta_th,
        cfg.freeze_reference,
        ecfg.global_max_iterations,
    )?;
    warnings.extend(result.warnings.iter().cloned());
    let cluster_sizes: Vec<usize> = state
        .clusters
        .iter()
        .map(|c| c.state.selected.len())
        .collect();
    let assignment: std::collections::BTreeMap<String, usize> = state
        .assignment_map()
        .into_iter()
        .map(|(v, c)| (v.to_string(), c))
        .collect();
    let mut details = json!({
        "n_clusters": state.n_clusters(),
        "cluster_sizes": cluster_sizes,
        "cluster_assignment": assignment,
        "n_ref": reference.n_ref,
        "alignment": result.stats,
    });
    if let (Some(obj), serde_json::Value::Object(extra)) = (details.as_object_mut(), mode_details)
    {
        for (k, v) in extra {
            obj.insert(k, v);
        }
    }
    Ok(PipelineResult {
        inlier_pairs: pairs_of(sub, &result.inlier_edges),
        final_cost: result.final_cost,
        excluded_vertices: excluded,
        details,
        traces,
        warnings,
        rotations: result.rotations,
    })
}

impl Pipeline for Irav4 {
    fn name(&self) -> &'static str {
        "irav4"
    }

    fn run(&self, g: &EpipolarGraph, cfg: &RunConfig) -> Result<PipelineResult> {
        let (sub, excluded) = operating_subgraph(g);
        let ecfg = cfg.engine();
        let (reference, ref_run) = cds::task_specific_cds(&sub, &ecfg)?;
        let traces = vec![("reference".into(), ref_run.trace)];
        run_with_reference(
            &sub,
            cfg,
            reference,
            ref_run.seed.i,
            traces,
            ref_run.warnings,
            excluded,
            json!({"reference_kind": "task-specific"}),
        )
    }
}

// ---------------------------------------------------------------------------
// Same pipeline with a task-independent reference: the union of several
// randomized coverage-greedy CDS extractions, estimated by the engine.
// ---------------------------------------------------------------------------

pub struct Irav3PlusRef;

/// Minimum number of randomized extractions whose union forms the reference;
/// more are drawn (up to the cap) until the union sub-graph is seedable.
const N_RANDOM_CDS: usize = 3;
const MAX_RANDOM_CDS: usize = 10;

impl Pipeline for Irav3PlusRef {
    fn name(&self) -> &'static str {
        "irav3plus-ref"
    }

    fn run(&self, g: &EpipolarGraph, cfg: &RunConfig) -> Result<PipelineResult> {
        let (sub, excluded) = operating_subgraph(g);
        let ecfg = cfg.engine();
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.rng_seed);
        let mut member_mask = vec![false; sub.n_vertices()];
        let mut n_extractions = 0;
        let mut run = None;
        while n_extractions < MAX_RANDOM_CDS {
            let r = cds::traditional_cds_randomized(&sub, &cds::CdsWeighting::Unweighted, &mut rng);
            for v in r.members {
                member_mask[v.idx()] = true;
            }
            n_extractions += 1;
            if n_extractions < N_RANDOM_CDS {
                continue;
            }
            let union: Vec<VertexId> = (0..sub.n_vertices() as u32)
                .map(VertexId)
                .filter(|v| member_mask[v.idx()])
                .collect();
            let ref_graph = sub.restrict_to(&union);
            match engine::run_incremental(
                &ref_graph,
                &ecfg,
                Frame::ReferenceLocal,
                |_, _| true,
                |st| st.remaining.is_empty(),
            ) {
                Ok(r) => {
                    run = Some(r);
                    break;
                }
                // A small union may be triangle-free; widen it and retry.
                Err(Error::NoValidSeed) if n_extractions < MAX_RANDOM_CDS => continue,
                Err(e) => return Err(e),
            }
        }
        let run = run.ok_or(Error::NoValidSeed)?;
        let union: Vec<VertexId> = (0..sub.n_vertices() as u32)
            .map(VertexId)
            .filter(|v| member_mask[v.idx()])
            .collect();
        let members: Vec<VertexId> = run.registration.vertices().collect();
        let reference = ReferenceSet {
            n_ref: members.len(),
            members,
            rotations: run.registration.clone(),
            connected: true,
            dominating: cds::is_connected_dominating(&sub, &union),
            e_ref: None,
        };
        let traces = vec![("reference".into(), run.trace)];
        run_with_reference(
            &sub,
            cfg,
            reference,
            run.seed.i,
            traces,
            run.warnings,
            excluded,
            json!({"reference_kind": "random-cds-union", "n_extractions": n_extractions}),
        )
    }
}

// ---------------------------------------------------------------------------
// Maximum-support spanning tree chaining (initialization only).
// ---------------------------------------------------------------------------

pub struct SpanningTree;

impl Pipeline for SpanningTree {
    fn name(&self) -> &'static str {
        "spanning-tree"
    }

    fn run(&self, g: &EpipolarGraph, cfg: &RunConfig) -> Result<PipelineResult> {
        let (sub, excluded) = operating_subgraph(g);
        // Edge support: number of triplets through the edge that pass the
        // chaining check.
        let mut support = vec![0u32; sub.n_edges()];
        for t in sub.enumerate_triplets() {
            let (passes, _) = engine::chaining_check(&sub, &t, cfg.theta_th);
            if passes {
                for (a, b) in [(t.i, t.j), (t.i, t.k), (t.j, t.k)] {
                    support[sub.edge_index(a, b).unwrap() as usize] += 1;
                }
            }
        }
        // Kruskal on descending support, ties toward the smaller edge.
        let mut order: Vec<u32> = (0..sub.n_edges() as u32).collect();
        order.sort_by_key(|&idx| {
            let e = sub.edge(idx);
            (std::cmp::Reverse(support[idx as usize]), e.i, e.j)
        });
        let mut parent: Vec<usize> = (0..sub.n_vertices()).collect();
        fn find(parent: &mut Vec<usize>, a: usize) -> usize {
            if parent[a] != a {
                let r = find(parent, parent[a]);
                parent[a] = r;
            }
            parent[a]
        }
        let mut adj: Vec<Vec<(VertexId, UnitRotation)>> = vec![Vec::new(); sub.n_vertices()];
        for &idx in &order {
            let e = sub.edge(idx);
            let (ra, rb) = (find(&mut parent, e.i.idx()), find(&mut parent, e.j.idx()));
            if ra != rb {
                parent[ra] = rb;
                adj[e.i.idx()].push((e.j, e.rot));
                adj[e.j.idx()].push((e.i, e.inv));
            }
        }
        // Chain from the lowest-index vertex of the component.
        let root = sub
            .vertices()
            .find(|&v| sub.degree(v) > 0)
            .ok_or(Error::NoValidSeed)?;
        let mut rotations = Registration::new(Frame::Global);
        rotations.insert(root, UnitRotation::IDENTITY);
        let mut stack = vec![root];
        while let Some(v) = stack.pop() {
            let rv = *rotations.get(v).unwrap();
            for &(u, r_vu) in &adj[v.idx()] {
                if !rotations.contains(u) {
                    rotations.insert(u, r_vu.compose(&rv));
                    stack.push(u);
                }
            }
        }
        // Classification against the chained rotations, no optimization.
        let cos_half = (cfg.theta_th.to_radians() / 2.0).cos();
        let mut inliers = Vec::new();
        let mut cost = 0.0;
        for (idx, e) in sub.edges().iter().enumerate() {
            let (Some(ri), Some(rj)) = (rotations.get(e.i), rotations.get(e.j)) else {
                continue;
            };
            let chained = e.rot.compose(ri);
            if so3::within_angle(&chained, rj, cos_half) {
                inliers.push(idx as u32);
                let d = chained.geodesic_radians(rj);
                cost += d * d;
            }
        }
        Ok(PipelineResult {
            inlier_pairs: pairs_of(&sub, &inliers),
            final_cost: cost,
            excluded_vertices: excluded,
            details: json!({"n_tree_edges": rotations.len().saturating_sub(1)}),
            traces: Vec::new(),
            warnings: Vec::new(),
            rotations,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::eval;
    use rand::{Rng, SeedableRng};

    fn synth_consistent(n: u32, prob: f64, seed: u64) -> (EpipolarGraph, Registration) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let gt: Vec<UnitRotation> = (0..n).map(|_| UnitRotation::sample_uniform(&mut rng)).collect();
        let mut records = Vec::new();
        for i in 0..n {
            for j in (i + 1)..n {
                if rng.random_bool(prob) {
                    records.push((i, j, gt[j as usize].compose(&gt[i as usize].inverse())));
                }
            }
        }
        let g = EpipolarGraph::from_edges(n as usize, records).unwrap();
        let mut reg = Registration::new(Frame::GroundTruth);
        for (i, r) in gt.iter().enumerate() {
            reg.insert(VertexId(i as u32), *r);
        }
        (g, reg)
    }

    #[test]
    fn registry_lists_all_strategies() {
        let names = names();
        assert_eq!(names, vec!["ira", "irav4", "irav3plus-ref", "spanning-tree"]);
        assert!(by_name("irav4").is_some());
        assert!(by_name("nonsense").is_none());
    }

    #[test]
    fn every_strategy_recovers_consistent_graph() {
        let (g, gt) = synth_consistent(24, 0.4, 101);
        assert_eq!(g.largest_component().len(), 24);
        for p in registry() {
            let out = p.run(&g, &RunConfig::default()).unwrap();
            let rep = eval::align_and_score(&out.rotations, &gt).unwrap();
            assert!(
                rep.median_error < 1e-6,
                "{} median {}",
                p.name(),
                rep.median_error
            );
            assert!(out.excluded_vertices.is_empty());
        }
    }

    #[test]
    fn excluded_vertices_are_reported_not_estimated() {
        let mut rng = ChaCha8Rng::seed_from_u64(102);
        let gt: Vec<UnitRotation> = (0..10).map(|_| UnitRotation::sample_uniform(&mut rng)).collect();
        // Component {0..6} plus a disjoint triangle {7,8,9}.
        let mut records = Vec::new();
        for i in 0..7u32 {
            for j in (i + 1)..7 {
                records.push((i, j, gt[j as usize].compose(&gt[i as usize].inverse())));
            }
        }
        for &(i, j) in &[(7u32, 8u32), (7, 9), (8, 9)] {
            records.push((i, j, gt[j as usize].compose(&gt[i as usize].inverse())));
        }
        let g = EpipolarGraph::from_edges(10, records).unwrap();
        let out = Ira.run(&g, &RunConfig::default()).unwrap();
        assert_eq!(out.excluded_vertices, vec![7, 8, 9]);
        assert_eq!(out.rotations.len(), 7);
        for v in [7u32, 8, 9] {
            assert!(!out.rotations.contains(VertexId(v)));
        }
    }

    #[test]
    fn irav4_single_cluster_override() {
        let (g, gt) = synth_consistent(18, 0.5, 103);
        let cfg = RunConfig {
            clusters: ClusterCount::Fixed(1),
            ..RunConfig::default()
        };
        let out = Irav4.run(&g, &cfg).unwrap();
        assert_eq!(out.details["n_clusters"], 1);
        let rep = eval::align_and_score(&out.rotations, &gt).unwrap();
        assert!(rep.median_error < 1e-6);
    }

    #[test]
    fn frozen_reference_still_recovers_consistent_graph() {
        let (g, gt) = synth_consistent(20, 0.5, 105);
        let cfg = RunConfig {
            freeze_reference: true,
            ..RunConfig::default()
        };
        let out = Irav4.run(&g, &cfg).unwrap();
        let rep = eval::align_and_score(&out.rotations, &gt).unwrap();
        assert!(rep.median_error < 1e-6);
        assert!(out.details["cluster_assignment"].is_object());
    }

    #[test]
    fn spanning_tree_is_exact_on_noise_free_data() {
        let (g, gt) = synth_consistent(15, 0.5, 104);
        let out = SpanningTree.run(&g, &RunConfig::default()).unwrap();
        let rep = eval::align_and_score(&out.rotations, &gt).unwrap();
        assert!(rep.median_error < 1e-6);
        assert_eq!(out.inlier_pairs.len(), g.n_edges());
    }
}
