//! Cluster seed construction and on-the-fly graph clustering with
//! per-cluster local rotation averaging.
//!
//! Communities found by greedy modularity agglomeration provide one seed
//! triplet each; clusters then grow by a global maximization of the
//! supporting-set reward across all (vertex, cluster) pairs, reusing the
//! engine's scoring and growth machinery per cluster.

use crate::engine::{self, CandidateScore, EngineConfig, GrowthContext, SeedResult};
use crate::error::{Error, Result};
use crate::graph::{EpipolarGraph, Frame, Registration, VertexId};
use std::collections::BTreeMap;

pub type ClusterId = usize;

/// Communities below this size dissolve into a strictly larger adjacent
/// community; tiny clusters make the later alignment underdetermined.
pub const MIN_COMMUNITY_SIZE: usize = 10;

// ---------------------------------------------------------------------------
// Greedy modularity (Louvain-style), deterministic vertex order, resolution 1.
// ---------------------------------------------------------------------------

struct WeightedGraph {
    adj: Vec<Vec<(usize, f64)>>,
    self_loop: Vec<f64>,
    total_weight: f64,
}

impl WeightedGraph {
    fn degree_weight(&self, v: usize) -> f64 {
        self.adj[v].iter().map(|&(_, w)| w).sum::<f64>() + 2.0 * self.self_loop[v]
    }
}

/// One pass of local moving; returns the community of each vertex and whether
/// any vertex moved.
fn louvain_level(g: &WeightedGraph) -> (Vec<usize>, bool) {
    let n = g.adj.len();
    let m = g.total_weight;
    let k: Vec<f64> = (0..n).map(|v| g.degree_weight(v)).collect();
    let mut comm: Vec<usize> = (0..n).collect();
    let mut sigma_tot = k.clone();
    let mut moved_any = false;
    loop {
        let mut moved = false;
        for v in 0..n {
            let cur = comm[v];
            sigma_tot[cur] -= k[v];
            // Weight from v into each neighboring community.
            let mut into: BTreeMap<usize, f64> = BTreeMap::new();
            into.insert(cur, 0.0);
            for &(u, w) in &g.adj[v] {
                *into.entry(comm[u]).or_insert(0.0) += w;
            }
            let score = |c: usize, w_in: f64| w_in - sigma_tot[c] * k[v] / (2.0 * m);
            let mut best_c = cur;
            let mut best_s = score(cur, into[&cur]);
            for (&c, &w_in) in &into {
                let s = score(c, w_in);
                if s > best_s {
                    best_s = s;
                    best_c = c;
                }
            }
            comm[v] = best_c;
            sigma_tot[best_c] += k[v];
            if best_c != cur {
                moved = true;
                moved_any = true;
            }
        }
        if !moved {
            break;
        }
    }
    (comm, moved_any)
}

fn renumber(comm: &[usize]) -> (Vec<usize>, usize) {
    let mut map = BTreeMap::new();
    let mut out = vec![0usize; comm.len()];
    for (v, &c) in comm.iter().enumerate() {
        let next = map.len();
        let id = *map.entry(c).or_insert(next);
        out[v] = id;
    }
    (out, map.len())
}

fn aggregate(g: &WeightedGraph, comm: &[usize], n_comm: usize) -> WeightedGraph {
    let mut self_loop = vec![0.0; n_comm];
    let mut weights: BTreeMap<(usize, usize), f64> = BTreeMap::new();
    for v in 0..g.adj.len() {
        self_loop[comm[v]] += g.self_loop[v];
        for &(u, w) in &g.adj[v] {
            if u < v {
                continue; // each undirected edge once
            }
            let (a, b) = (comm[v], comm[u]);
            if a == b {
                self_loop[a] += w;
            } else {
                *weights.entry((a.min(b), a.max(b))).or_insert(0.0) += w;
            }
        }
    }
    let mut adj = vec![Vec::new(); n_comm];
    for (&(a, b), &w) in &weights {
        adj[a].push((b, w));
        adj[b].push((a, w));
    }
    WeightedGraph {
        adj,
        self_loop,
        total_weight: g.total_weight,
    }
}

/// Modularity-maximizing partition of the graph's vertices. Community ids are
/// dense, ordered by each community's smallest vertex.
pub fn detect_communities(g: &EpipolarGraph) -> Vec<Vec<VertexId>> {
    let n = g.n_vertices();
    let mut wg = WeightedGraph {
        adj: (0..n)
            .map(|v| {
                g.neighbors(VertexId(v as u32))
                    .iter()
                    .map(|&(u, _)| (u.idx(), 1.0))
                    .collect()
            })
            .collect(),
        self_loop: vec![0.0; n],
        total_weight: g.n_edges() as f64,
    };
    if g.n_edges() == 0 {
        return g.vertices().map(|v| vec![v]).collect();
    }
    // vertex -> community through all aggregation levels
    let mut membership: Vec<usize> = (0..n).collect();
    loop {
        let (comm, moved) = louvain_level(&wg);
        let (comm, n_comm) = renumber(&comm);
        if !moved {
            break;
        }
        for slot in membership.iter_mut() {
            *slot = comm[*slot];
        }
        if n_comm == wg.adj.len() {
            break;
        }
        wg = aggregate(&wg, &comm, n_comm);
    }
    // Group, ordered by smallest vertex.
    let mut groups: BTreeMap<usize, Vec<VertexId>> = BTreeMap::new();
    for (v, &c) in membership.iter().enumerate() {
        groups.entry(c).or_default().push(VertexId(v as u32));
    }
    let mut out: Vec<Vec<VertexId>> = groups.into_values().collect();
    out.sort_by_key(|c| c[0]);
    out
}

/// Dissolves communities below [`MIN_COMMUNITY_SIZE`] into their largest
/// strictly-larger adjacent community; equal-size peers are left alone so
/// that small balanced graphs keep their structure.
fn merge_small_communities(
    g: &EpipolarGraph,
    mut comms: Vec<Vec<VertexId>>,
) -> Vec<Vec<VertexId>> {
    loop {
        if comms.len() <= 1 {
            return comms;
        }
        let mut of: BTreeMap<VertexId, usize> = BTreeMap::new();
        for (c, members) in comms.iter().enumerate() {
            for &v in members {
                of.insert(v, c);
            }
        }
        // Smallest community first; stable order by index on ties.
        let mut order: Vec<usize> = (0..comms.len()).collect();
        order.sort_by_key(|&c| (comms[c].len(), c));
        let mut merged = None;
        for &c in &order {
            if comms[c].len() >= MIN_COMMUNITY_SIZE {
                break;
            }
            // Largest adjacent community, ties to the lowest id.
            let mut best: Option<(usize, usize)> = None; // (size, id)
            for &v in &comms[c] {
                for &(u, _) in g.neighbors(v) {
                    let cu = of[&u];
                    if cu == c {
                        continue;
                    }
                    let key = (comms[cu].len(), cu);
                    let better = match best {
                        None => true,
                        Some((bs, bi)) => key.0 > bs || (key.0 == bs && key.1 < bi),
                    };
                    if better {
                        best = Some(key);
                    }
                }
            }
            if let Some((size, target)) = best {
                if size > comms[c].len() {
                    merged = Some((c, target));
                    break;
                }
            }
        }
        match merged {
            Some((c, target)) => {
                let mut members = std::mem::take(&mut comms[c]);
                comms[target].append(&mut members);
                comms[target].sort();
                comms.remove(c);
            }
            None => return comms,
        }
    }
}

#[derive(Debug, Clone)]
pub struct CommunitySeeds {
    pub seeds: Vec<SeedResult>,
    /// Post-merge communities, parallel to `seeds` where a seed was found.
    pub communities: Vec<Vec<VertexId>>,
    /// Communities without any valid triplet; their vertices start
    /// unassigned and are absorbed during growth.
    pub dissolved: Vec<Vec<VertexId>>,
}

/// Community detection followed by per-community seed selection.
pub fn community_seeds(g: &EpipolarGraph, cfg: &EngineConfig) -> Result<CommunitySeeds> {
    let comms = merge_small_communities(g, detect_communities(g));
    let mut seeds = Vec::new();
    let mut kept = Vec::new();
    let mut dissolved = Vec::new();
    for members in comms {
        if members.len() < 3 {
            dissolved.push(members);
            continue;
        }
        let sub = g.restrict_to(&members);
        match engine::select_seed(&sub, cfg) {
            Ok(seed) => {
                seeds.push(seed);
                kept.push(members);
            }
            Err(Error::NoValidSeed) => dissolved.push(members),
            Err(e) => return Err(e),
        }
    }
    if seeds.is_empty() {
        return Err(Error::NoValidSeed);
    }
    Ok(CommunitySeeds {
        seeds,
        communities: kept,
        dissolved,
    })
}

/// Per-cluster growth state after all vertices are assigned.
pub struct ClusterState {
    pub clusters: Vec<GrowthContext>,
    /// Cluster of each vertex; `None` for vertices outside the operating set.
    pub assignment: Vec<Option<ClusterId>>,
}

impl ClusterState {
    pub fn local_frame(&self, c: ClusterId) -> &Registration {
        &self.clusters[c].state.estimates
    }

    pub fn n_clusters(&self) -> usize {
        self.clusters.len()
    }

    pub fn assignment_map(&self) -> BTreeMap<u32, usize> {
        self.assignment
            .iter()
            .enumerate()
            .filter_map(|(v, c)| c.map(|c| (v as u32, c)))
            .collect()
    }
}

/// Grows every cluster from its seed until the whole operating set is
/// assigned. Each iteration scores all unassigned vertices adjacent to each
/// cluster and admits the globally best (vertex, cluster) pair; ties go to
/// the lower cluster id, then the lower vertex index.
pub fn grow_clusters(
    g: &EpipolarGraph,
    seeds: &[SeedResult],
    cfg: &EngineConfig,
) -> Result<ClusterState> {
    let mut assignment: Vec<Option<ClusterId>> = vec![None; g.n_vertices()];
    let mut contexts: Vec<GrowthContext> = Vec::with_capacity(seeds.len());
    for (c, seed) in seeds.iter().enumerate() {
        for v in [seed.triplet.i, seed.triplet.j, seed.triplet.k] {
            if assignment[v.idx()].is_some() {
                return Err(Error::BadConfig(format!(
                    "seed triplets overlap at vertex {v}"
                )));
            }
            assignment[v.idx()] = Some(c);
        }
        contexts.push(GrowthContext::from_seed(g, seed, cfg, Frame::ClusterLocal(c)));
    }
    // Vertices seeded in one cluster leave every other cluster's remaining set.
    for (c, ctx) in contexts.iter_mut().enumerate() {
        let seeded: Vec<VertexId> = (0..g.n_vertices())
            .filter_map(|v| match assignment[v] {
                Some(owner) if owner != c => Some(VertexId(v as u32)),
                _ => None,
            })
            .collect();
        for v in seeded {
            ctx.exclude(v);
        }
    }

    let mut unassigned = g
        .vertices()
        .filter(|&v| g.degree(v) > 0 && assignment[v.idx()].is_none())
        .count();

    while unassigned > 0 {
        let mut best: Option<(ClusterId, CandidateScore)> = None;
        for (c, ctx) in contexts.iter_mut().enumerate() {
            let frontier = ctx.frontier(g);
            for s in ctx.scores(g, &frontier) {
                let better = match &best {
                    None => true,
                    Some((_, b)) => s.reward > b.reward,
                };
                if better {
                    best = Some((c, s));
                }
            }
        }
        let Some((winner, choice)) = best else {
            return Err(Error::Stalled);
        };
        contexts[winner].admit(g, &choice)?;
        assignment[choice.p.idx()] = Some(winner);
        unassigned -= 1;
        for (c, ctx) in contexts.iter_mut().enumerate() {
            if c != winner {
                ctx.exclude(choice.p);
            }
        }
    }

    for ctx in &mut contexts {
        ctx.finalize(g)?;
    }
    Ok(ClusterState {
        clusters: contexts,
        assignment,
    })
}
