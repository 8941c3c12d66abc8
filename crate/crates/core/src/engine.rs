//! The incremental estimation engine.
//!
//! Seed-triplet selection, then a loop of next-best-vertex selection,
//! chaining-based initialization, local optimization, and cadenced global
//! optimization with inlier filtering. The loop is parameterized by a
//! candidate filter and a termination predicate so that plain incremental
//! averaging, cluster growth, and task-specific CDS construction all share
//! one code path.

use crate::error::{Error, Result};
use crate::graph::{EpipolarGraph, Frame, Registration, Triplet, VertexId};
use crate::so3::{self, UnitRotation};
use crate::solver::{self, ManifoldProblem, ResidualTerm};
use rayon::prelude::*;
use serde::Serialize;
use std::collections::{BTreeSet, HashMap};

#[derive(Debug, Clone)]
pub struct EngineConfig {
    /// Outlier threshold in degrees.
    pub theta_th: f64,
    /// Fractional growth of the selected set that triggers a global
    /// optimization.
    pub global_rate: f64,
    /// Iteration caps for the single-variable and all-variable problems.
    pub local_max_iterations: usize,
    pub global_max_iterations: usize,
}

impl Default for EngineConfig {
    fn default() -> Self {
        EngineConfig {
            theta_th: 3.0,
            global_rate: 0.05,
            local_max_iterations: 20,
            global_max_iterations: 100,
        }
    }
}

/// The winning seed triplet with its optimized rotations (first vertex is
/// the gauge and carries the identity).
#[derive(Debug, Clone)]
pub struct SeedResult {
    pub triplet: Triplet,
    pub rotations: [UnitRotation; 3],
    pub reward: f64,
}

/// Triplet consistency: compares the measured `R_{j,k}` against the
/// composition of the other two edges. Returns `(passes, deviation_degrees)`.
pub fn chaining_check(g: &EpipolarGraph, t: &Triplet, theta_th: f64) -> (bool, f64) {
    let r_ij = g.relative(t.i, t.j).expect("triplet edge (i,j)");
    let r_ik = g.relative(t.i, t.k).expect("triplet edge (i,k)");
    let r_jk = g.relative(t.j, t.k).expect("triplet edge (j,k)");
    let chained = r_ik.compose(&r_ij.inverse());
    let deviation = so3::angular_distance(&r_jk, &chained);
    (deviation < theta_th, deviation)
}

fn optimize_triplet(
    g: &EpipolarGraph,
    t: &Triplet,
    cfg: &EngineConfig,
) -> (f64, [UnitRotation; 3]) {
    let r_ij = g.relative(t.i, t.j).unwrap();
    let r_ik = g.relative(t.i, t.k).unwrap();
    let r_jk = g.relative(t.j, t.k).unwrap();
    let mut p = ManifoldProblem::new();
    p.variables.insert(t.i, UnitRotation::IDENTITY);
    p.variables.insert(t.j, r_ij);
    p.variables.insert(t.k, r_ik);
    p.fixed.insert(t.i);
    p.terms = vec![
        ResidualTerm { i: t.i, j: t.j, meas: r_ij },
        ResidualTerm { i: t.i, j: t.k, meas: r_ik },
        ResidualTerm { i: t.j, j: t.k, meas: r_jk },
    ];
    p.max_iterations = cfg.local_max_iterations;
    let (out, _) = solver::solve_best_effort(&p).expect("triplet problem is well-posed");
    let ri = out.solution[&t.i];
    let rj = out.solution[&t.j];
    let rk = out.solution[&t.k];
    // Selection reward: sum of cos(d) over the triplet's own three edges.
    let reward = so3::cos_angular_distance(&r_ij, &rj.compose(&ri.inverse()))
        + so3::cos_angular_distance(&r_ik, &rk.compose(&ri.inverse()))
        + so3::cos_angular_distance(&r_jk, &rk.compose(&rj.inverse()));
    (reward, [ri, rj, rk])
}

/// Seed selection over an explicit triplet list (must be lexicographically
/// sorted; ties go to the earlier triplet).
pub fn select_seed_among(
    g: &EpipolarGraph,
    triplets: &[Triplet],
    cfg: &EngineConfig,
) -> Result<SeedResult> {
    let scored: Vec<Option<(f64, [UnitRotation; 3])>> = triplets
        .par_iter()
        .map(|t| {
            let (passes, _) = chaining_check(g, t, cfg.theta_th);
            if !passes {
                return None;
            }
            Some(optimize_triplet(g, t, cfg))
        })
        .collect();
    let mut best: Option<SeedResult> = None;
    for (t, s) in triplets.iter().zip(scored) {
        if let Some((reward, rotations)) = s {
            let better = match &best {
                None => true,
                Some(b) => reward > b.reward,
            };
            if better {
                best = Some(SeedResult {
                    triplet: *t,
                    rotations,
                    reward,
                });
            }
        }
    }
    best.ok_or(Error::NoValidSeed)
}

/// Seed selection over every triplet of the graph.
pub fn select_seed(g: &EpipolarGraph, cfg: &EngineConfig) -> Result<SeedResult> {
    select_seed_among(g, &g.enumerate_triplets(), cfg)
}

/// Scored candidate: best anchor `m_star` in the selected set, its chaining
/// initialization, and the supporting-set reward.
#[derive(Debug, Clone)]
pub struct CandidateScore {
    pub p: VertexId,
    pub m_star: VertexId,
    pub reward: f64,
    pub support_size: usize,
    pub init: UnitRotation,
}

#[derive(Debug, Clone)]
pub struct IncrementalState {
    pub selected: BTreeSet<VertexId>,
    pub remaining: BTreeSet<VertexId>,
    pub estimates: Registration,
    pub theta_th: f64,
    pub last_global_size: usize,
    pub global_rate: f64,
    /// Gauge vertex (the seed triplet's first vertex), fixed in every global
    /// optimization.
    pub gauge: VertexId,
    /// Selection order including the seed vertices; lets termination
    /// predicates track growth incrementally.
    pub order: Vec<VertexId>,
    selected_mask: Vec<bool>,
}

impl IncrementalState {
    pub fn is_selected(&self, v: VertexId) -> bool {
        self.selected_mask[v.idx()]
    }
}

fn score_candidate(
    g: &EpipolarGraph,
    state: &IncrementalState,
    p: VertexId,
    cos_half_theta: f64,
) -> Option<CandidateScore> {
    // Chained pre-computations R_p^m = R_{m,p} R_m for every edge into the
    // selected set, in ascending anchor order.
    let mut anchors: Vec<(VertexId, UnitRotation)> = Vec::new();
    for &(m, eidx) in g.neighbors(p) {
        if state.is_selected(m) {
            let r_mp = g.edge(eidx).rot_from(m);
            anchors.push((m, r_mp.compose(state.estimates.get(m)?)));
        }
    }
    if anchors.is_empty() {
        return None;
    }
    // The supporting set of anchor m is, by bi-invariance, the set of anchors
    // whose chained rotations lie within theta of R_p^m. Reward is the sum of
    // cos(distance) over that set.
    let mut best: Option<(VertexId, f64, usize, UnitRotation)> = None;
    for (mi, &(m, ref a_m)) in anchors.iter().enumerate() {
        // The generating edge supports itself with cos(0) = 1 exactly, so
        // single-edge candidates tie at 1.0 and the index tie-break applies.
        let mut reward = 1.0;
        let mut support = 1;
        for (ni, (_, a_n)) in anchors.iter().enumerate() {
            if ni == mi {
                continue;
            }
            if so3::within_angle(a_m, a_n, cos_half_theta) {
                reward += so3::cos_angular_distance(a_m, a_n);
                support += 1;
            }
        }
        let better = match best {
            None => true,
            Some((_, r, _, _)) => reward > r,
        };
        if better {
            best = Some((m, reward, support, *a_m));
        }
    }
    let (m_star, reward, support_size, init) = best.unwrap();
    Some(CandidateScore {
        p,
        m_star,
        reward,
        support_size,
        init,
    })
}

/// Evaluates chaining pre-computation, supporting sets, and selection rewards
/// for each candidate. Candidates without an edge into the selected set are
/// skipped and reported.
pub fn candidate_rewards(
    g: &EpipolarGraph,
    state: &IncrementalState,
    candidates: &[VertexId],
) -> (Vec<CandidateScore>, Vec<VertexId>) {
    let cos_half = (state.theta_th.to_radians() / 2.0).cos();
    let scored: Vec<(VertexId, Option<CandidateScore>)> = candidates
        .par_iter()
        .map(|&p| (p, score_candidate(g, state, p, cos_half)))
        .collect();
    let mut scores = Vec::new();
    let mut skipped = Vec::new();
    for (p, s) in scored {
        match s {
            Some(score) => scores.push(score),
            None => skipped.push(p),
        }
    }
    (scores, skipped)
}

/// Argmax of the reward; ties go to the lowest vertex index. The input must
/// be sorted by vertex (as `candidate_rewards` returns it).
pub fn select_nbv(rewards: &[CandidateScore]) -> Result<&CandidateScore> {
    let mut best: Option<&CandidateScore> = None;
    for s in rewards {
        let better = match best {
            None => true,
            Some(b) => s.reward > b.reward,
        };
        if better {
            best = Some(s);
        }
    }
    best.ok_or(Error::EmptyFrontier)
}

fn local_optimize_impl(
    g: &EpipolarGraph,
    state: &IncrementalState,
    p_star: VertexId,
    init: &UnitRotation,
    local_max_iterations: usize,
) -> (UnitRotation, f64) {
    let cos_half = (state.theta_th.to_radians() / 2.0).cos();
    let mut problem = ManifoldProblem::new();
    problem.variables.insert(p_star, *init);
    // Inlier set computed against the chaining initialization, as written;
    // the generating edge always supports itself, so it is never empty.
    for &(n, eidx) in g.neighbors(p_star) {
        if !state.is_selected(n) {
            continue;
        }
        let r_n = *state.estimates.get(n).expect("selected vertex has estimate");
        let r_np = g.edge(eidx).rot_from(n);
        let chained = r_np.compose(&r_n);
        if so3::within_angle(&chained, init, cos_half) {
            problem.variables.insert(n, r_n);
            problem.fixed.insert(n);
            problem.terms.push(ResidualTerm {
                i: n,
                j: p_star,
                meas: r_np,
            });
        }
    }
    problem.max_iterations = local_max_iterations;
    let (out, _) = solver::solve_best_effort(&problem).expect("local problem is well-posed");
    (out.solution[&p_star], out.report.final_cost)
}

/// Single-variable optimization of the newly selected vertex against its
/// inlier edges into the selected set.
pub fn local_optimize(
    g: &EpipolarGraph,
    state: &IncrementalState,
    p_star: VertexId,
    init: &UnitRotation,
) -> UnitRotation {
    local_optimize_impl(g, state, p_star, init, 20).0
}

#[derive(Debug, Clone)]
pub struct GlobalOptReport {
    pub final_cost: f64,
    /// Edge indices classified inlier against the pre-optimization estimates.
    pub inlier_edges: Vec<u32>,
    pub converged: bool,
}

/// All-variable optimization over the inlier edges internal to the selected
/// set; replaces the state's estimates. The gauge vertex stays fixed.
pub fn global_optimize(
    g: &EpipolarGraph,
    state: &mut IncrementalState,
    global_max_iterations: usize,
) -> Result<GlobalOptReport> {
    let cos_half = (state.theta_th.to_radians() / 2.0).cos();
    let mut problem = ManifoldProblem::new();
    for (v, r) in state.estimates.iter() {
        problem.variables.insert(v, *r);
    }
    problem.fixed.insert(state.gauge);
    let mut inlier_edges = Vec::new();
    for (idx, e) in g.edges().iter().enumerate() {
        if !(state.is_selected(e.i) && state.is_selected(e.j)) {
            continue;
        }
        let ri = state.estimates.get(e.i).unwrap();
        let rj = state.estimates.get(e.j).unwrap();
        // d(R_{i,j}, R_j R_i^T) = d(R_{i,j} R_i, R_j) by right-invariance.
        if so3::within_angle(&e.rot.compose(ri), rj, cos_half) {
            inlier_edges.push(idx as u32);
            problem.terms.push(ResidualTerm {
                i: e.i,
                j: e.j,
                meas: e.rot,
            });
        }
    }
    problem.max_iterations = global_max_iterations;
    if problem.terms.is_empty() {
        return Ok(GlobalOptReport {
            final_cost: 0.0,
            inlier_edges,
            converged: true,
        });
    }
    let (out, converged) = solver::solve_best_effort(&problem)?;
    let frame = state.estimates.frame.clone();
    let mut estimates = Registration::new(frame);
    for (v, r) in out.solution {
        estimates.insert(v, r);
    }
    state.estimates = estimates;
    Ok(GlobalOptReport {
        final_cost: out.report.final_cost,
        inlier_edges,
        converged,
    })
}

/// One engine iteration, as recorded in the JSON-lines trace.
#[derive(Debug, Clone, Serialize, PartialEq)]
pub struct TraceRecord {
    pub step: usize,
    pub chosen_vertex: u32,
    pub anchor_vertex: u32,
    pub reward: f64,
    pub support_size: usize,
    pub global_opt: bool,
    pub cost_after: f64,
}

/// Driver state for one growing registration: the incremental state plus the
/// trace and a per-candidate score cache.
///
/// The cache never changes selection order: entries are invalidated whenever
/// the candidate's edge set into the selected set or any involved estimate
/// could have changed (neighbor admitted, or any global optimization).
pub struct GrowthContext {
    pub state: IncrementalState,
    pub trace: Vec<TraceRecord>,
    pub warnings: Vec<String>,
    cfg: EngineConfig,
    cache: HashMap<VertexId, CandidateScore>,
}

impl GrowthContext {
    /// Starts from an optimized seed. The remaining set is every non-isolated
    /// vertex of `g` outside the seed triplet.
    pub fn from_seed(
        g: &EpipolarGraph,
        seed: &SeedResult,
        cfg: &EngineConfig,
        frame: Frame,
    ) -> GrowthContext {
        let t = seed.triplet;
        let mut estimates = Registration::new(frame);
        estimates.insert(t.i, seed.rotations[0]);
        estimates.insert(t.j, seed.rotations[1]);
        estimates.insert(t.k, seed.rotations[2]);
        let mut selected_mask = vec![false; g.n_vertices()];
        for v in [t.i, t.j, t.k] {
            selected_mask[v.idx()] = true;
        }
        let selected: BTreeSet<VertexId> = [t.i, t.j, t.k].into();
        let remaining: BTreeSet<VertexId> = g
            .vertices()
            .filter(|&v| g.degree(v) > 0 && !selected_mask[v.idx()])
            .collect();
        GrowthContext {
            state: IncrementalState {
                selected,
                remaining,
                estimates,
                theta_th: cfg.theta_th,
                last_global_size: 3,
                global_rate: cfg.global_rate,
                gauge: t.i,
                order: vec![t.i, t.j, t.k],
                selected_mask,
            },
            trace: Vec::new(),
            warnings: Vec::new(),
            cfg: cfg.clone(),
            cache: HashMap::new(),
        }
    }

    /// Removes a vertex from this context's remaining set (it was assigned
    /// elsewhere). Scores of other candidates are unaffected.
    pub fn exclude(&mut self, v: VertexId) {
        self.state.remaining.remove(&v);
        self.cache.remove(&v);
    }

    /// Remaining vertices with at least one edge into the selected set.
    pub fn frontier(&self, g: &EpipolarGraph) -> Vec<VertexId> {
        self.state
            .remaining
            .iter()
            .copied()
            .filter(|&p| {
                g.neighbors(p)
                    .iter()
                    .any(|&(m, _)| self.state.is_selected(m))
            })
            .collect()
    }

    /// Scores for the given candidates, served from the cache where valid.
    pub fn scores(&mut self, g: &EpipolarGraph, candidates: &[VertexId]) -> Vec<CandidateScore> {
        let missing: Vec<VertexId> = candidates
            .iter()
            .copied()
            .filter(|p| !self.cache.contains_key(p))
            .collect();
        let (fresh, _skipped) = candidate_rewards(g, &self.state, &missing);
        for s in fresh {
            self.cache.insert(s.p, s);
        }
        candidates
            .iter()
            .filter_map(|p| self.cache.get(p).cloned())
            .collect()
    }

    /// Admits the chosen vertex: local optimization, bookkeeping, and the
    /// cadenced global optimization. Appends one trace record.
    pub fn admit(&mut self, g: &EpipolarGraph, choice: &CandidateScore) -> Result<()> {
        let (rotation, local_cost) = local_optimize_impl(
            g,
            &self.state,
            choice.p,
            &choice.init,
            self.cfg.local_max_iterations,
        );
        let st = &mut self.state;
        st.remaining.remove(&choice.p);
        st.selected.insert(choice.p);
        st.selected_mask[choice.p.idx()] = true;
        st.estimates.insert(choice.p, rotation);
        st.order.push(choice.p);
        self.cache.remove(&choice.p);
        for &(n, _) in g.neighbors(choice.p) {
            self.cache.remove(&n);
        }

        let size = self.state.selected.len();
        let due =
            size as f64 >= self.state.last_global_size as f64 * (1.0 + self.state.global_rate);
        let mut cost_after = local_cost;
        if due {
            let report = global_optimize(g, &mut self.state, self.cfg.global_max_iterations)?;
            if !report.converged {
                self.warnings
                    .push(format!("global optimization at size {size} hit the iteration cap"));
            }
            self.state.last_global_size = size;
            self.cache.clear();
            cost_after = report.final_cost;
        }
        self.trace.push(TraceRecord {
            step: self.trace.len() + 1,
            chosen_vertex: choice.p.0,
            anchor_vertex: choice.m_star.0,
            reward: choice.reward,
            support_size: choice.support_size,
            global_opt: due,
            cost_after,
        });
        Ok(())
    }

    /// The unconditional final global optimization.
    pub fn finalize(&mut self, g: &EpipolarGraph) -> Result<GlobalOptReport> {
        let report = global_optimize(g, &mut self.state, self.cfg.global_max_iterations)?;
        if !report.converged {
            self.warnings
                .push("final global optimization hit the iteration cap".into());
        }
        self.state.last_global_size = self.state.selected.len();
        self.cache.clear();
        Ok(report)
    }
}

#[derive(Debug, Clone)]
pub struct RunOutput {
    pub registration: Registration,
    pub seed: Triplet,
    /// Edge indices classified inlier by the final global optimization.
    pub inlier_edges: Vec<u32>,
    pub final_cost: f64,
    pub trace: Vec<TraceRecord>,
    pub warnings: Vec<String>,
}

/// Drives seed selection and the NBV loop until `termination` is true or the
/// frontier is exhausted, then runs one final global optimization.
pub fn run_incremental(
    g: &EpipolarGraph,
    cfg: &EngineConfig,
    frame: Frame,
    mut candidate_filter: impl FnMut(&IncrementalState, VertexId) -> bool,
    mut termination: impl FnMut(&IncrementalState) -> bool,
) -> Result<RunOutput> {
    let seed = select_seed(g, cfg)?;
    let mut ctx = GrowthContext::from_seed(g, &seed, cfg, frame);
    loop {
        if termination(&ctx.state) || ctx.state.remaining.is_empty() {
            break;
        }
        let frontier: Vec<VertexId> = ctx
            .frontier(g)
            .into_iter()
            .filter(|&p| candidate_filter(&ctx.state, p))
            .collect();
        if frontier.is_empty() {
            return Err(Error::Stalled);
        }
        let scores = ctx.scores(g, &frontier);
        let choice = select_nbv(&scores)?.clone();
        ctx.admit(g, &choice)?;
    }
    let report = ctx.finalize(g)?;
    Ok(RunOutput {
        registration: ctx.state.estimates,
        seed: seed.triplet,
        inlier_edges: report.inlier_edges,
        final_cost: report.final_cost,
        trace: ctx.trace,
        warnings: ctx.warnings,
    })
}
