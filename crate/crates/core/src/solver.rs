//! Nonlinear least squares over products of SO(3).
//!
//! Minimizes sums of squared geodesic residuals `d^2(meas, R_j * R_i^T)` with
//! selected rotations held fixed (gauge). Levenberg-Marquardt with analytic
//! Jacobians in the right-multiplicative tangent space (`R <- R * exp(delta)`).
//! The per-term residual is the 3-vector `log(meas * (R_j * R_i^T)^-1)`, whose
//! norm equals the geodesic distance in radians; this keeps the Jacobian
//! smooth at zero residual, unlike the scalar arccos form.
//!
//! The normal equations are solved by dense Cholesky up to
//! [`DENSE_LIMIT`] free rotations and by a block-Jacobi preconditioned
//! conjugate gradient above that.

use crate::error::{Error, Result};
use crate::graph::VertexId;
use crate::so3::UnitRotation;
use nalgebra::{DMatrix, DVector, Matrix3, Vector3};
use std::collections::{BTreeMap, BTreeSet};

/// Free-variable count beyond which the linear solve switches to CG.
pub const DENSE_LIMIT: usize = 600;

const LAMBDA_INIT: f64 = 1e-4;
const LAMBDA_MAX: f64 = 1e12;
const LAMBDA_MIN: f64 = 1e-15;

/// One summand `d^2(meas, R_j * R_i^T)`.
#[derive(Debug, Clone, Copy)]
pub struct ResidualTerm {
    pub i: VertexId,
    pub j: VertexId,
    /// The measured `R_{i,j}`.
    pub meas: UnitRotation,
}

#[derive(Debug, Clone)]
pub struct ManifoldProblem {
    /// Initial values for every rotation appearing in a term.
    pub variables: BTreeMap<VertexId, UnitRotation>,
    /// Rotations held constant. If empty, the solver fixes the lowest-index
    /// variable (the problem is gauge-free otherwise).
    pub fixed: BTreeSet<VertexId>,
    pub terms: Vec<ResidualTerm>,
    pub max_iterations: usize,
    pub gradient_tol: f64,
    pub step_tol: f64,
}

impl ManifoldProblem {
    pub fn new() -> ManifoldProblem {
        ManifoldProblem {
            variables: BTreeMap::new(),
            fixed: BTreeSet::new(),
            terms: Vec::new(),
            max_iterations: 100,
            gradient_tol: 1e-10,
            step_tol: 1e-12,
        }
    }
}

impl Default for ManifoldProblem {
    fn default() -> Self {
        ManifoldProblem::new()
    }
}

#[derive(Debug, Clone)]
pub struct SolveReport {
    pub initial_cost: f64,
    pub final_cost: f64,
    pub iterations: usize,
    pub converged: bool,
    /// Cost after every accepted step, for monotonicity checks.
    pub accepted_costs: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct SolveOutcome {
    pub solution: BTreeMap<VertexId, UnitRotation>,
    pub report: SolveReport,
}

/// `[v]_x` skew matrix.
fn hat(v: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

/// Inverse right Jacobian of the SO(3) logarithm at `phi`.
fn inv_right_jacobian(phi: &Vector3<f64>) -> Matrix3<f64> {
    let theta = phi.norm();
    let h = hat(phi);
    let c = if theta < 1e-4 {
        let t2 = theta * theta;
        1.0 / 12.0 + t2 / 720.0 + t2 * t2 / 30_240.0
    } else {
        1.0 / (theta * theta) - (1.0 + theta.cos()) / (2.0 * theta * theta.sin())
    };
    Matrix3::identity() + 0.5 * h + c * (h * h)
}

struct Workspace {
    ids: Vec<VertexId>,
    values: Vec<UnitRotation>,
    /// Free slot per variable position, `usize::MAX` when fixed.
    slot: Vec<usize>,
    n_free: usize,
    /// Per term: positions of `i` and `j` in `ids`.
    term_pos: Vec<(usize, usize)>,
}

impl Workspace {
    fn build(p: &ManifoldProblem) -> Result<Workspace> {
        let ids: Vec<VertexId> = p.variables.keys().copied().collect();
        let values: Vec<UnitRotation> = p.variables.values().copied().collect();
        let pos_of = |v: VertexId| -> Result<usize> {
            ids.binary_search(&v).map_err(|_| {
                Error::BadConfig(format!("residual endpoint {v} has no initial value"))
            })
        };
        let mut term_pos = Vec::with_capacity(p.terms.len());
        for t in &p.terms {
            term_pos.push((pos_of(t.i)?, pos_of(t.j)?));
        }
        let mut fixed: BTreeSet<VertexId> = p.fixed.iter().copied().collect();
        if fixed.is_empty() {
            if let Some(first) = ids.first() {
                fixed.insert(*first);
            }
        }
        let mut slot = vec![usize::MAX; ids.len()];
        let mut n_free = 0;
        for (pos, id) in ids.iter().enumerate() {
            if !fixed.contains(id) {
                slot[pos] = n_free;
                n_free += 1;
            }
        }
        Ok(Workspace {
            ids,
            values,
            slot,
            n_free,
            term_pos,
        })
    }

    /// Residual vectors and total cost; `Err` when a residual angle falls in
    /// the ambiguity band around pi.
    fn residuals(
        &self,
        values: &[UnitRotation],
        terms: &[ResidualTerm],
    ) -> Result<(Vec<Vector3<f64>>, f64)> {
        let mut out = Vec::with_capacity(terms.len());
        let mut cost = 0.0;
        for (t, &(pi, pj)) in terms.iter().zip(&self.term_pos) {
            let x = t
                .meas
                .compose(&values[pi])
                .compose(&values[pj].inverse());
            let r = x.log_map()?;
            cost += r.norm_squared();
            out.push(r);
        }
        Ok((out, cost))
    }

    fn retract(&self, values: &[UnitRotation], delta: &DVector<f64>) -> Vec<UnitRotation> {
        let mut out = values.to_vec();
        for (pos, &s) in self.slot.iter().enumerate() {
            if s != usize::MAX {
                let d = Vector3::new(delta[3 * s], delta[3 * s + 1], delta[3 * s + 2]);
                out[pos] = out[pos].compose(&UnitRotation::exp_map(&d));
            }
        }
        out
    }
}

/// Per-term Jacobian blocks: `d r / d delta_i = +B`, `d r / d delta_j = -B`
/// with `B = Jr^-1(r) * R_j`.
fn term_block(r: &Vector3<f64>, rj: &UnitRotation) -> Matrix3<f64> {
    inv_right_jacobian(r) * rj.to_matrix()
}

struct NormalEquations {
    /// Gauss-Newton gradient `J^T r` per free slot.
    g: DVector<f64>,
    /// Diagonal 3x3 blocks of `J^T J`.
    diag: Vec<Matrix3<f64>>,
    /// Off-diagonal blocks, keyed `(a, b)` with `a < b`.
    off: BTreeMap<(usize, usize), Matrix3<f64>>,
}

fn assemble(
    ws: &Workspace,
    values: &[UnitRotation],
    terms: &[ResidualTerm],
    residuals: &[Vector3<f64>],
) -> NormalEquations {
    let mut g = DVector::zeros(3 * ws.n_free);
    let mut diag = vec![Matrix3::zeros(); ws.n_free];
    let mut off: BTreeMap<(usize, usize), Matrix3<f64>> = BTreeMap::new();
    for ((_t, &(pi, pj)), r) in terms.iter().zip(&ws.term_pos).zip(residuals) {
        let b = term_block(r, &values[pj]);
        let (si, sj) = (ws.slot[pi], ws.slot[pj]);
        let btb = b.transpose() * b;
        let btr = b.transpose() * r;
        if si != usize::MAX {
            diag[si] += btb;
            for k in 0..3 {
                g[3 * si + k] += btr[k];
            }
        }
        if sj != usize::MAX {
            diag[sj] += btb;
            for k in 0..3 {
                g[3 * sj + k] -= btr[k];
            }
        }
        if si != usize::MAX && sj != usize::MAX {
            // J_i^T J_j = -B^T B; store toward the (min, max) key.
            let (a, b2, block) = if si < sj {
                (si, sj, -btb)
            } else {
                (sj, si, -btb.transpose())
            };
            *off.entry((a, b2)).or_insert_with(Matrix3::zeros) += block;
        }
    }
    NormalEquations { g, diag, off }
}

fn solve_dense(ne: &NormalEquations, lambda: f64, n_free: usize) -> Option<DVector<f64>> {
    let dim = 3 * n_free;
    let mut h = DMatrix::zeros(dim, dim);
    for (s, block) in ne.diag.iter().enumerate() {
        for a in 0..3 {
            for b in 0..3 {
                h[(3 * s + a, 3 * s + b)] = block[(a, b)];
            }
        }
    }
    for (&(i, j), block) in &ne.off {
        for a in 0..3 {
            for b in 0..3 {
                h[(3 * i + a, 3 * j + b)] = block[(a, b)];
                h[(3 * j + b, 3 * i + a)] = block[(a, b)];
            }
        }
    }
    for d in 0..dim {
        h[(d, d)] += lambda;
    }
    let chol = h.cholesky()?;
    Some(chol.solve(&-&ne.g))
}

/// Block-Jacobi preconditioned CG on `(H + lambda I) x = -g`.
fn solve_sparse(ne: &NormalEquations, lambda: f64, n_free: usize) -> Option<DVector<f64>> {
    // Symmetric block adjacency for the matvec.
    let mut rows: Vec<Vec<(usize, Matrix3<f64>)>> = vec![Vec::new(); n_free];
    for (&(i, j), block) in &ne.off {
        rows[i].push((j, *block));
        rows[j].push((i, block.transpose()));
    }
    let mut diag = ne.diag.clone();
    for d in diag.iter_mut() {
        *d += Matrix3::identity() * lambda;
    }
    let pre: Vec<Matrix3<f64>> = diag
        .iter()
        .map(|d| d.cholesky().map(|c| c.inverse()))
        .collect::<Option<Vec<_>>>()?;

    let matvec = |x: &DVector<f64>, out: &mut DVector<f64>| {
        for s in 0..n_free {
            let xs = Vector3::new(x[3 * s], x[3 * s + 1], x[3 * s + 2]);
            let mut acc = diag[s] * xs;
            for &(o, ref block) in &rows[s] {
                let xo = Vector3::new(x[3 * o], x[3 * o + 1], x[3 * o + 2]);
                acc += block * xo;
            }
            out[3 * s] = acc.x;
            out[3 * s + 1] = acc.y;
            out[3 * s + 2] = acc.z;
        }
    };
    let precond = |r: &DVector<f64>, out: &mut DVector<f64>| {
        for s in 0..n_free {
            let rs = Vector3::new(r[3 * s], r[3 * s + 1], r[3 * s + 2]);
            let z = pre[s] * rs;
            out[3 * s] = z.x;
            out[3 * s + 1] = z.y;
            out[3 * s + 2] = z.z;
        }
    };

    let dim = 3 * n_free;
    let b = -&ne.g;
    let bnorm = b.norm();
    if bnorm == 0.0 {
        return Some(DVector::zeros(dim));
    }
    let tol = 1e-12 * bnorm;
    let mut x = DVector::zeros(dim);
    let mut r = b.clone();
    let mut z = DVector::zeros(dim);
    precond(&r, &mut z);
    let mut p = z.clone();
    let mut rz = r.dot(&z);
    let mut ap = DVector::zeros(dim);
    let max_iter = 2 * dim + 200;
    for _ in 0..max_iter {
        if r.norm() <= tol {
            break;
        }
        matvec(&p, &mut ap);
        let pap = p.dot(&ap);
        if pap <= 0.0 {
            break;
        }
        let alpha = rz / pap;
        x.axpy(alpha, &p, 1.0);
        r.axpy(-alpha, &ap, 1.0);
        precond(&r, &mut z);
        let rz_new = r.dot(&z);
        let beta = rz_new / rz;
        rz = rz_new;
        p = &z + beta * &p;
    }
    Some(x)
}

fn solve_damped(ne: &NormalEquations, lambda: f64, n_free: usize) -> Option<DVector<f64>> {
    if n_free <= DENSE_LIMIT {
        solve_dense(ne, lambda, n_free)
    } else {
        solve_sparse(ne, lambda, n_free)
    }
}

/// Deterministic tiny perturbation used to retry when a residual lands in the
/// log map's ambiguity band around pi.
fn jitter(ws: &Workspace, values: &[UnitRotation], attempt: usize) -> Vec<UnitRotation> {
    let scale = 1e-5 * attempt as f64;
    let mut out = values.to_vec();
    for (pos, &s) in ws.slot.iter().enumerate() {
        if s != usize::MAX {
            let d = Vector3::new(scale, 2.0 * scale, 3.0 * scale);
            out[pos] = out[pos].compose(&UnitRotation::exp_map(&d));
        }
    }
    out
}

/// Minimizes the problem's cost. Fixed variables are returned bit-identical.
///
/// Non-convergence within `max_iterations` returns
/// [`Error::DidNotConverge`] carrying the best iterate and its report.
pub fn solve(p: &ManifoldProblem) -> Result<SolveOutcome> {
    let ws = Workspace::build(p)?;
    let mut values = ws.values.clone();

    // Initial evaluation, with up to 3 jittered retries around pi.
    let mut eval = ws.residuals(&values, &p.terms);
    for attempt in 1..=3 {
        match eval {
            Err(Error::NearPiAmbiguity) => {
                values = jitter(&ws, &values, attempt);
                eval = ws.residuals(&values, &p.terms);
            }
            _ => break,
        }
    }
    let (mut residuals, mut cost) = eval?;
    let initial_cost = cost;
    let mut accepted_costs = vec![cost];
    let mut lambda = LAMBDA_INIT;
    let mut iterations = 0;
    let mut converged = ws.n_free == 0 || p.terms.is_empty();

    'outer: while !converged && iterations < p.max_iterations {
        let ne = assemble(&ws, &values, &p.terms, &residuals);
        // True cost gradient is 2 J^T r.
        if ne.g.amax() * 2.0 < p.gradient_tol {
            converged = true;
            break;
        }
        loop {
            if iterations >= p.max_iterations {
                break 'outer;
            }
            iterations += 1;
            let Some(delta) = solve_damped(&ne, lambda, ws.n_free) else {
                lambda *= 10.0;
                if lambda > LAMBDA_MAX {
                    // No representable descent step; treat as stationary.
                    converged = true;
                    break 'outer;
                }
                continue;
            };
            let candidate = ws.retract(&values, &delta);
            match ws.residuals(&candidate, &p.terms) {
                Ok((new_res, new_cost)) if new_cost < cost => {
                    values = candidate;
                    residuals = new_res;
                    cost = new_cost;
                    accepted_costs.push(cost);
                    lambda = (lambda / 10.0).max(LAMBDA_MIN);
                    if delta.amax() < p.step_tol {
                        converged = true;
                        break 'outer;
                    }
                    break;
                }
                _ => {
                    lambda *= 10.0;
                    if lambda > LAMBDA_MAX {
                        converged = true;
                        break 'outer;
                    }
                }
            }
        }
    }

    let mut solution = BTreeMap::new();
    for (pos, id) in ws.ids.iter().enumerate() {
        if ws.slot[pos] == usize::MAX {
            // Bit-identical: hand back the caller's value.
            solution.insert(*id, p.variables[id]);
        } else {
            solution.insert(*id, values[pos]);
        }
    }
    let outcome = SolveOutcome {
        solution,
        report: SolveReport {
            initial_cost,
            final_cost: cost,
            iterations,
            converged,
            accepted_costs,
        },
    };
    if converged {
        Ok(outcome)
    } else {
        Err(Error::DidNotConverge(Box::new(outcome)))
    }
}

/// Runs `solve`, keeping the best iterate when the iteration budget runs out.
/// Returns the outcome and whether it converged.
pub fn solve_best_effort(p: &ManifoldProblem) -> Result<(SolveOutcome, bool)> {
    match solve(p) {
        Ok(out) => Ok((out, true)),
        Err(Error::DidNotConverge(out)) => Ok((*out, false)),
        Err(e) => Err(e),
    }
}

/// Max over free variables and tangent axes of
/// `|analytic - central difference| / (1 + |analytic|)` for the cost gradient
/// at the problem's initial values.
pub fn numeric_gradient_check(p: &ManifoldProblem, h: f64) -> Result<f64> {
    assert!((1e-8..=1e-3).contains(&h), "h out of range");
    let ws = Workspace::build(p)?;
    let values = ws.values.clone();
    let (residuals, _) = ws.residuals(&values, &p.terms)?;
    let ne = assemble(&ws, &values, &p.terms, &residuals);

    let mut worst: f64 = 0.0;
    for (pos, &s) in ws.slot.iter().enumerate() {
        if s == usize::MAX {
            continue;
        }
        for axis in 0..3 {
            let analytic = 2.0 * ne.g[3 * s + axis];
            let mut d = Vector3::zeros();
            d[axis] = h;
            let mut plus = values.clone();
            plus[pos] = plus[pos].compose(&UnitRotation::exp_map(&d));
            let (_, cost_plus) = ws.residuals(&plus, &p.terms)?;
            let mut minus = values.clone();
            d[axis] = -h;
            minus[pos] = minus[pos].compose(&UnitRotation::exp_map(&d));
            let (_, cost_minus) = ws.residuals(&minus, &p.terms)?;
            let numeric = (cost_plus - cost_minus) / (2.0 * h);
            let dev = (analytic - numeric).abs() / (1.0 + analytic.abs());
            worst = worst.max(dev);
        }
    }
    Ok(worst)
}
