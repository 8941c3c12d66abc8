//! Epipolar-graph data model and bit-exact text I/O.
//!
//! The graph is undirected and simple. Each edge carries the relative
//! rotation `R_{i,j}` under the convention `R_j = R_{i,j} * R_i`; edges are
//! stored with `i < j` and the opposite direction is served from a
//! precomputed inverse rather than re-derived.

use crate::error::{Error, Result};
use crate::so3::UnitRotation;
use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::io::{BufRead, Write};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct VertexId(pub u32);

impl VertexId {
    #[inline]
    pub fn idx(self) -> usize {
        self.0 as usize
    }
}

impl std::fmt::Display for VertexId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// One undirected measurement, stored with `i < j`.
#[derive(Debug, Clone, Copy)]
pub struct RelativeMeasurement {
    pub i: VertexId,
    pub j: VertexId,
    /// `R_{i,j}` with `R_j = R_{i,j} * R_i`.
    pub rot: UnitRotation,
    /// `R_{j,i}`, constructed once at insertion.
    pub inv: UnitRotation,
}

impl RelativeMeasurement {
    /// `R_{tail,head}` for whichever endpoint is given as the tail.
    #[inline]
    pub fn rot_from(&self, tail: VertexId) -> UnitRotation {
        debug_assert!(tail == self.i || tail == self.j);
        if tail == self.i {
            self.rot
        } else {
            self.inv
        }
    }

    #[inline]
    pub fn other(&self, v: VertexId) -> VertexId {
        if v == self.i {
            self.j
        } else {
            self.i
        }
    }
}

/// A 3-clique `i < j < k` whose three edges all exist.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub struct Triplet {
    pub i: VertexId,
    pub j: VertexId,
    pub k: VertexId,
}

#[derive(Debug, Clone)]
pub struct EpipolarGraph {
    n_vertices: usize,
    edges: Vec<RelativeMeasurement>,
    /// Per-vertex `(neighbor, edge index)`, sorted by neighbor.
    adjacency: Vec<Vec<(VertexId, u32)>>,
}

impl EpipolarGraph {
    /// Builds a graph from `(i, j, R_{i,j})` records. Records may name either
    /// endpoint first; storage is normalized to `i < j`.
    pub fn from_edges(
        n_vertices: usize,
        records: impl IntoIterator<Item = (u32, u32, UnitRotation)>,
    ) -> Result<EpipolarGraph> {
        let mut g = EpipolarGraph {
            n_vertices,
            edges: Vec::new(),
            adjacency: vec![Vec::new(); n_vertices],
        };
        let mut seen = BTreeMap::new();
        for (line, (a, b, rot)) in records.into_iter().enumerate() {
            g.push_edge(a, b, rot, line + 1, &mut seen)?;
        }
        g.finish();
        Ok(g)
    }

    fn push_edge(
        &mut self,
        a: u32,
        b: u32,
        rot: UnitRotation,
        line: usize,
        seen: &mut BTreeMap<(u32, u32), ()>,
    ) -> Result<()> {
        if a == b {
            return Err(Error::Parse {
                line,
                msg: format!("self-loop on vertex {a}"),
            });
        }
        let (i, j, rot) = if a < b { (a, b, rot) } else { (b, a, rot.inverse()) };
        if seen.insert((i, j), ()).is_some() {
            return Err(Error::DuplicateEdge { i, j, line });
        }
        let need = (j as usize) + 1;
        if need > self.n_vertices {
            self.n_vertices = need;
            self.adjacency.resize(need, Vec::new());
        }
        self.edges.push(RelativeMeasurement {
            i: VertexId(i),
            j: VertexId(j),
            rot,
            inv: rot.inverse(),
        });
        Ok(())
    }

    fn finish(&mut self) {
        self.edges.sort_by_key(|e| (e.i, e.j));
        for adj in &mut self.adjacency {
            adj.clear();
        }
        for (idx, e) in self.edges.iter().enumerate() {
            self.adjacency[e.i.idx()].push((e.j, idx as u32));
            self.adjacency[e.j.idx()].push((e.i, idx as u32));
        }
        for adj in &mut self.adjacency {
            adj.sort_by_key(|&(v, _)| v);
        }
    }

    pub fn n_vertices(&self) -> usize {
        self.n_vertices
    }

    pub fn n_edges(&self) -> usize {
        self.edges.len()
    }

    pub fn edges(&self) -> &[RelativeMeasurement] {
        &self.edges
    }

    pub fn edge(&self, idx: u32) -> &RelativeMeasurement {
        &self.edges[idx as usize]
    }

    pub fn vertices(&self) -> impl Iterator<Item = VertexId> + '_ {
        (0..self.n_vertices as u32).map(VertexId)
    }

    /// `(neighbor, edge index)` pairs sorted by neighbor index.
    pub fn neighbors(&self, v: VertexId) -> &[(VertexId, u32)] {
        &self.adjacency[v.idx()]
    }

    pub fn degree(&self, v: VertexId) -> usize {
        self.adjacency[v.idx()].len()
    }

    pub fn edge_index(&self, a: VertexId, b: VertexId) -> Option<u32> {
        self.adjacency[a.idx()]
            .binary_search_by_key(&b, |&(v, _)| v)
            .ok()
            .map(|pos| self.adjacency[a.idx()][pos].1)
    }

    pub fn has_edge(&self, a: VertexId, b: VertexId) -> bool {
        self.edge_index(a, b).is_some()
    }

    /// `R_{a,b}` (so that `R_b = R_{a,b} * R_a`), if the edge exists.
    pub fn relative(&self, a: VertexId, b: VertexId) -> Option<UnitRotation> {
        self.edge_index(a, b).map(|idx| self.edge(idx).rot_from(a))
    }

    /// All 3-cliques, each exactly once, in lexicographic order.
    ///
    /// Order is part of the contract: downstream tie-breaking depends on it.
    pub fn enumerate_triplets(&self) -> Vec<Triplet> {
        let mut out = Vec::new();
        for e in &self.edges {
            let (i, j) = (e.i, e.j);
            let an = &self.adjacency[i.idx()];
            let bn = &self.adjacency[j.idx()];
            let (mut p, mut q) = (0, 0);
            while p < an.len() && q < bn.len() {
                let (u, v) = (an[p].0, bn[q].0);
                if u == v {
                    if u > j {
                        out.push(Triplet { i, j, k: u });
                    }
                    p += 1;
                    q += 1;
                } else if u < v {
                    p += 1;
                } else {
                    q += 1;
                }
            }
        }
        out.sort();
        out
    }

    /// Connected components as disjoint vertex lists, each sorted, ordered by
    /// their smallest vertex. Isolated vertices form singleton components.
    pub fn connected_components(&self) -> Vec<Vec<VertexId>> {
        let mut seen = vec![false; self.n_vertices];
        let mut out = Vec::new();
        for root in 0..self.n_vertices {
            if seen[root] {
                continue;
            }
            seen[root] = true;
            let mut comp = vec![VertexId(root as u32)];
            let mut stack = vec![VertexId(root as u32)];
            while let Some(v) = stack.pop() {
                for &(u, _) in self.neighbors(v) {
                    if !seen[u.idx()] {
                        seen[u.idx()] = true;
                        comp.push(u);
                        stack.push(u);
                    }
                }
            }
            comp.sort();
            out.push(comp);
        }
        out
    }

    /// The largest component (ties broken toward the smallest leading vertex).
    pub fn largest_component(&self) -> Vec<VertexId> {
        self.connected_components()
            .into_iter()
            .max_by_key(|c| c.len())
            .unwrap_or_default()
    }

    /// Same vertex set, edges restricted to those internal to `keep`.
    pub fn restrict_to(&self, keep: &[VertexId]) -> EpipolarGraph {
        let mut mask = vec![false; self.n_vertices];
        for v in keep {
            mask[v.idx()] = true;
        }
        let records = self
            .edges
            .iter()
            .filter(|e| mask[e.i.idx()] && mask[e.j.idx()])
            .map(|e| (e.i.0, e.j.0, e.rot));
        let mut g = EpipolarGraph::from_edges(self.n_vertices, records)
            .expect("restriction of a valid graph is valid");
        g.n_vertices = self.n_vertices;
        g.adjacency.resize(self.n_vertices, Vec::new());
        g
    }
}

// ---------------------------------------------------------------------------
// Text formats
// ---------------------------------------------------------------------------

const NORM_REJECT: f64 = 1e-3;

fn parse_quat(fields: &[&str], line: usize) -> Result<UnitRotation> {
    let mut q = [0.0f64; 4];
    for (slot, field) in q.iter_mut().zip(fields) {
        *slot = field.parse().map_err(|_| Error::Parse {
            line,
            msg: format!("bad number `{field}`"),
        })?;
    }
    let norm = (q[0] * q[0] + q[1] * q[1] + q[2] * q[2] + q[3] * q[3]).sqrt();
    if (norm - 1.0).abs() > NORM_REJECT {
        return Err(Error::NonUnitQuaternion { line, norm });
    }
    Ok(UnitRotation::from_wxyz(q[0], q[1], q[2], q[3]))
}

/// Loads an EG file: `# comment` lines and `e <i> <j> <qw> <qx> <qy> <qz>`
/// records. Quaternions with norm error up to 1e-3 are renormalized silently;
/// larger deviations are rejected.
pub fn load_graph<R: BufRead>(reader: R) -> Result<EpipolarGraph> {
    let mut g = EpipolarGraph {
        n_vertices: 0,
        edges: Vec::new(),
        adjacency: Vec::new(),
    };
    let mut seen = BTreeMap::new();
    for (lineno, line) in reader.lines().enumerate() {
        let lineno = lineno + 1;
        let line = line?;
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields[0] != "e" || fields.len() != 7 {
            return Err(Error::Parse {
                line: lineno,
                msg: format!("expected `e <i> <j> <qw> <qx> <qy> <qz>`, got `{line}`"),
            });
        }
        let parse_id = |s: &str| -> Result<u32> {
            s.parse().map_err(|_| Error::Parse {
                line: lineno,
                msg: format!("bad vertex id `{s}`"),
            })
        };
        let a = parse_id(fields[1])?;
        let b = parse_id(fields[2])?;
        let rot = parse_quat(&fields[3..7], lineno)?;
        g.push_edge(a, b, rot, lineno, &mut seen)?;
    }
    g.finish();
    Ok(g)
}

fn write_quat(out: &mut String, r: &UnitRotation) {
    let [w, x, y, z] = r.wxyz();
    // 17 significant digits round-trip f64 exactly.
    write!(out, "{w:.16e} {x:.16e} {y:.16e} {z:.16e}").unwrap();
}

pub fn save_graph<W: Write>(g: &EpipolarGraph, mut writer: W) -> Result<()> {
    let mut buf = String::new();
    for e in g.edges() {
        buf.clear();
        write!(buf, "e {} {} ", e.i, e.j).unwrap();
        write_quat(&mut buf, &e.rot);
        buf.push('\n');
        writer.write_all(buf.as_bytes())?;
    }
    Ok(())
}

/// Coordinate frame a registration's rotations are expressed in.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Frame {
    ClusterLocal(usize),
    ReferenceLocal,
    Global,
    GroundTruth,
}

/// A partial map vertex -> absolute rotation in a named frame.
#[derive(Debug, Clone)]
pub struct Registration {
    pub frame: Frame,
    rotations: BTreeMap<VertexId, UnitRotation>,
}

impl Registration {
    pub fn new(frame: Frame) -> Registration {
        Registration {
            frame,
            rotations: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, v: VertexId, r: UnitRotation) {
        self.rotations.insert(v, r);
    }

    pub fn get(&self, v: VertexId) -> Option<&UnitRotation> {
        self.rotations.get(&v)
    }

    pub fn contains(&self, v: VertexId) -> bool {
        self.rotations.contains_key(&v)
    }

    pub fn len(&self) -> usize {
        self.rotations.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rotations.is_empty()
    }

    /// Sorted by vertex id.
    pub fn iter(&self) -> impl Iterator<Item = (VertexId, &UnitRotation)> {
        self.rotations.iter().map(|(v, r)| (*v, r))
    }

    pub fn vertices(&self) -> impl Iterator<Item = VertexId> + '_ {
        self.rotations.keys().copied()
    }
}

/// Loads an absolute-rotation file: `v <i> <qw> <qx> <qy> <qz>` records.
pub fn load_registration<R: BufRead>(reader: R, frame: Frame) -> Result<Registration> {
    let mut reg = Registration::new(frame);
    for (lineno, line) in reader.lines().enumerate() {
        let lineno = lineno + 1;
        let line = line?;
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields[0] != "v" || fields.len() != 6 {
            return Err(Error::Parse {
                line: lineno,
                msg: format!("expected `v <i> <qw> <qx> <qy> <qz>`, got `{line}`"),
            });
        }
        let id: u32 = fields[1].parse().map_err(|_| Error::Parse {
            line: lineno,
            msg: format!("bad vertex id `{}`", fields[1]),
        })?;
        let rot = parse_quat(&fields[2..6], lineno)?;
        reg.insert(VertexId(id), rot);
    }
    Ok(reg)
}

pub fn save_registration<W: Write>(reg: &Registration, mut writer: W) -> Result<()> {
    let mut buf = String::new();
    for (v, r) in reg.iter() {
        buf.clear();
        write!(buf, "v {v} ").unwrap();
        write_quat(&mut buf, r);
        buf.push('\n');
        writer.write_all(buf.as_bytes())?;
    }
    Ok(())
}
