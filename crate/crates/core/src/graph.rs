//! Graph structure of the grid: cycles, cycle bases and the reactance-weighted
//! cycle space.
//!
//! All routines accept forests of several components; a cycle basis then has
//! `m - n + components` members. Grid cases themselves are always connected.

use std::cmp::Ordering;
use std::collections::{HashSet, VecDeque};

use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::case::GridCase;
use crate::error::{Error, Result};

/// Vertices `0..n_vertices` and oriented edges `(tail, head)` indexed by
/// branch id.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct OrientedGraph {
    pub n_vertices: usize,
    pub edges: Vec<(usize, usize)>,
}

impl OrientedGraph {
    pub fn new(n_vertices: usize, edges: Vec<(usize, usize)>) -> Result<Self> {
        for (e, &(a, b)) in edges.iter().enumerate() {
            if a >= n_vertices || b >= n_vertices {
                return Err(Error::InvalidParameter(format!(
                    "edge {e} ({a}, {b}) references a vertex outside 0..{n_vertices}"
                )));
            }
            if a == b {
                return Err(Error::InvalidParameter(format!("edge {e} is a self-loop")));
            }
        }
        Ok(OrientedGraph { n_vertices, edges })
    }

    pub fn n_edges(&self) -> usize {
        self.edges.len()
    }

    /// Incident `(neighbour, edge id)` pairs per vertex, in edge-id order.
    pub fn adjacency(&self) -> Vec<Vec<(usize, usize)>> {
        let mut adj = vec![Vec::new(); self.n_vertices];
        for (e, &(a, b)) in self.edges.iter().enumerate() {
            adj[a].push((b, e));
            adj[b].push((a, e));
        }
        adj
    }

    pub fn components(&self) -> usize {
        let mut uf = UnionFind::new(self.n_vertices);
        for &(a, b) in &self.edges {
            uf.union(a, b);
        }
        uf.count
    }

    /// Dimension of the cycle space, `m - n + components`.
    pub fn cyclomatic_number(&self) -> usize {
        self.n_edges() + self.components() - self.n_vertices
    }

    /// Graph on the same vertex set keeping only `kept` edges, renumbered in
    /// the given order.
    pub fn subgraph(&self, kept: &[usize]) -> OrientedGraph {
        OrientedGraph {
            n_vertices: self.n_vertices,
            edges: kept.iter().map(|&e| self.edges[e]).collect(),
        }
    }
}

struct UnionFind {
    parent: Vec<usize>,
    count: usize,
}

impl UnionFind {
    fn new(n: usize) -> Self {
        UnionFind {
            parent: (0..n).collect(),
            count: n,
        }
    }

    fn find(&mut self, mut x: usize) -> usize {
        while self.parent[x] != x {
            self.parent[x] = self.parent[self.parent[x]];
            x = self.parent[x];
        }
        x
    }

    fn union(&mut self, a: usize, b: usize) -> bool {
        let (ra, rb) = (self.find(a), self.find(b));
        if ra == rb {
            return false;
        }
        self.parent[ra] = rb;
        self.count -= 1;
        true
    }
}

/// Vertex `i` is the `i`-th bus; edge `e` is branch `e`, oriented from → to.
pub fn build_graph(case: &GridCase) -> OrientedGraph {
    OrientedGraph {
        n_vertices: case.n_buses(),
        edges: case.branch_endpoints(),
    }
}

// ---------------------------------------------------------------------------
// Cycles
// ---------------------------------------------------------------------------

/// A simple cycle stored in traversal order. `signs[k]` is +1 when edge
/// `edge_ids[k]` is traversed along its graph orientation, -1 otherwise.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Cycle {
    edge_ids: Vec<usize>,
    signs: Vec<i8>,
}

impl Cycle {
    /// Orders and orients the edge set of a simple cycle. Traversal starts
    /// with `first_edge` in its own orientation.
    pub fn from_edge_set(graph: &OrientedGraph, edges: &[usize], first_edge: usize) -> Result<Cycle> {
        let set: HashSet<usize> = edges.iter().copied().collect();
        if set.len() != edges.len() {
            return Err(Error::InvalidParameter("cycle lists an edge twice".into()));
        }
        if set.len() < 2 {
            return Err(Error::InvalidParameter("a cycle needs at least two edges".into()));
        }
        if !set.contains(&first_edge) {
            return Err(Error::InvalidParameter(format!(
                "start edge {first_edge} is not in the cycle"
            )));
        }
        let mut incident: Vec<Vec<usize>> = vec![Vec::new(); graph.n_vertices];
        for &e in edges {
            let &(a, b) = graph.edges.get(e).ok_or_else(|| {
                Error::InvalidParameter(format!("edge {e} is not in the graph"))
            })?;
            incident[a].push(e);
            incident[b].push(e);
        }
        if incident.iter().any(|inc| !inc.is_empty() && inc.len() != 2) {
            return Err(Error::InvalidParameter(
                "edge set is not a simple cycle (vertex degree != 2)".into(),
            ));
        }

        let (start, mut at) = graph.edges[first_edge];
        let mut order = vec![first_edge];
        let mut signs = vec![1i8];
        let mut prev = first_edge;
        while at != start {
            let next = if incident[at][0] == prev {
                incident[at][1]
            } else {
                incident[at][0]
            };
            let (a, b) = graph.edges[next];
            if a == at {
                signs.push(1);
                at = b;
            } else {
                signs.push(-1);
                at = a;
            }
            order.push(next);
            prev = next;
            if order.len() > edges.len() {
                break;
            }
        }
        if order.len() != edges.len() {
            return Err(Error::InvalidParameter(
                "edge set splits into several cycles".into(),
            ));
        }
        Ok(Cycle {
            edge_ids: order,
            signs,
        })
    }

    /// Canonical orientation: traversal starts at the lowest edge id in that
    /// edge's graph orientation.
    pub fn canonical(graph: &OrientedGraph, edges: &[usize]) -> Result<Cycle> {
        let first = *edges
            .iter()
            .min()
            .ok_or_else(|| Error::InvalidParameter("empty cycle".into()))?;
        Cycle::from_edge_set(graph, edges, first)
    }

    pub fn edge_ids(&self) -> &[usize] {
        &self.edge_ids
    }

    pub fn signs(&self) -> &[i8] {
        &self.signs
    }

    pub fn len(&self) -> usize {
        self.edge_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.edge_ids.is_empty()
    }

    pub fn contains(&self, edge: usize) -> bool {
        self.edge_ids.contains(&edge)
    }

    pub fn sorted_edges(&self) -> Vec<usize> {
        let mut v = self.edge_ids.clone();
        v.sort_unstable();
        v
    }

    /// Relabels edge ids through `map` (e.g. subgraph index → branch id).
    pub fn relabel(&self, map: &[usize]) -> Cycle {
        Cycle {
            edge_ids: self.edge_ids.iter().map(|&e| map[e]).collect(),
            signs: self.signs.clone(),
        }
    }

    pub fn weight(&self, weights: &[f64]) -> f64 {
        self.edge_ids.iter().map(|&e| weights[e]).sum()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BasisKind {
    Fundamental,
    Minimum,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CycleBasis {
    pub cycles: Vec<Cycle>,
    pub kind: BasisKind,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CycleRecord {
    pub edge_ids: Vec<usize>,
    pub signs: Vec<i8>,
    pub length: usize,
}

impl CycleBasis {
    pub fn len(&self) -> usize {
        self.cycles.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cycles.is_empty()
    }

    pub fn lengths(&self) -> Vec<usize> {
        self.cycles.iter().map(Cycle::len).collect()
    }

    pub fn total_length(&self) -> usize {
        self.cycles.iter().map(Cycle::len).sum()
    }

    pub fn max_length(&self) -> usize {
        self.cycles.iter().map(Cycle::len).max().unwrap_or(0)
    }

    pub fn records(&self) -> Vec<CycleRecord> {
        self.cycles
            .iter()
            .map(|c| CycleRecord {
                edge_ids: c.edge_ids.clone(),
                signs: c.signs.clone(),
                length: c.len(),
            })
            .collect()
    }

    /// Audit export: a JSON list of `{edge_ids, signs, length}`.
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&self.records()).expect("records serialize")
    }

    /// Rank over GF(2) of the unsigned indicators.
    pub fn gf2_rank(&self, m: usize) -> usize {
        let mut elim = Gf2Eliminator::new(m);
        self.cycles
            .iter()
            .filter(|c| elim.insert(&c.edge_ids))
            .count()
    }
}

/// Incremental Gaussian elimination over GF(2) on edge-indicator bitsets.
pub struct Gf2Eliminator {
    words: usize,
    rows: Vec<(usize, Vec<u64>)>,
}

impl Gf2Eliminator {
    pub fn new(m: usize) -> Self {
        Gf2Eliminator {
            words: m.div_ceil(64).max(1),
            rows: Vec::new(),
        }
    }

    /// Adds the indicator of `edges`; returns false when it is already in the
    /// span of the accepted rows.
    pub fn insert(&mut self, edges: &[usize]) -> bool {
        let mut v = vec![0u64; self.words];
        for &e in edges {
            v[e / 64] ^= 1 << (e % 64);
        }
        for (pivot, row) in &self.rows {
            if v[pivot / 64] >> (pivot % 64) & 1 == 1 {
                for (x, r) in v.iter_mut().zip(row) {
                    *x ^= r;
                }
            }
        }
        match lowest_bit(&v) {
            Some(pivot) => {
                // keep rows fully reduced so later reductions stay one pass
                for (_, row) in self.rows.iter_mut() {
                    if row[pivot / 64] >> (pivot % 64) & 1 == 1 {
                        for (r, x) in row.iter_mut().zip(&v) {
                            *r ^= x;
                        }
                    }
                }
                self.rows.push((pivot, v));
                true
            }
            None => false,
        }
    }

    pub fn rank(&self) -> usize {
        self.rows.len()
    }
}

fn lowest_bit(v: &[u64]) -> Option<usize> {
    v.iter()
        .enumerate()
        .find(|(_, w)| **w != 0)
        .map(|(i, w)| i * 64 + w.trailing_zeros() as usize)
}

// ---------------------------------------------------------------------------
// Fundamental bases
// ---------------------------------------------------------------------------

/// Fundamental basis of a breadth-first spanning forest (roots in vertex
/// order, neighbours in edge-id order). Each non-tree edge closes one cycle
/// and is traversed first, along its own orientation.
pub fn fundamental_cycle_basis(g: &OrientedGraph) -> CycleBasis {
    let adj = g.adjacency();
    let mut in_tree = vec![false; g.n_edges()];
    let mut seen = vec![false; g.n_vertices];
    for root in 0..g.n_vertices {
        if seen[root] {
            continue;
        }
        seen[root] = true;
        let mut queue = VecDeque::from([root]);
        while let Some(u) = queue.pop_front() {
            for &(w, e) in &adj[u] {
                if !seen[w] {
                    seen[w] = true;
                    in_tree[e] = true;
                    queue.push_back(w);
                }
            }
        }
    }
    fundamental_from_tree(g, &in_tree)
}

/// Fundamental basis of a random spanning forest (Kruskal over a shuffled
/// edge order).
pub fn random_fundamental_basis<R: Rng + ?Sized>(g: &OrientedGraph, rng: &mut R) -> CycleBasis {
    let mut order: Vec<usize> = (0..g.n_edges()).collect();
    order.shuffle(rng);
    let mut uf = UnionFind::new(g.n_vertices);
    let mut in_tree = vec![false; g.n_edges()];
    for e in order {
        let (a, b) = g.edges[e];
        if uf.union(a, b) {
            in_tree[e] = true;
        }
    }
    fundamental_from_tree(g, &in_tree)
}

fn fundamental_from_tree(g: &OrientedGraph, in_tree: &[bool]) -> CycleBasis {
    // root the forest
    let adj = g.adjacency();
    let mut parent: Vec<Option<(usize, usize)>> = vec![None; g.n_vertices];
    let mut depth = vec![0usize; g.n_vertices];
    let mut seen = vec![false; g.n_vertices];
    for root in 0..g.n_vertices {
        if seen[root] {
            continue;
        }
        seen[root] = true;
        let mut queue = VecDeque::from([root]);
        while let Some(u) = queue.pop_front() {
            for &(w, e) in &adj[u] {
                if in_tree[e] && !seen[w] {
                    seen[w] = true;
                    parent[w] = Some((u, e));
                    depth[w] = depth[u] + 1;
                    queue.push_back(w);
                }
            }
        }
    }

    let mut cycles = Vec::new();
    for (e, &(a, b)) in g.edges.iter().enumerate() {
        if in_tree[e] {
            continue;
        }
        let mut edges = vec![e];
        let (mut x, mut y) = (a, b);
        while x != y {
            if depth[x] >= depth[y] {
                let (p, pe) = parent[x].expect("non-root has a parent");
                edges.push(pe);
                x = p;
            } else {
                let (p, pe) = parent[y].expect("non-root has a parent");
                edges.push(pe);
                y = p;
            }
        }
        cycles.push(Cycle::from_edge_set(g, &edges, e).expect("tree path closes a simple cycle"));
    }
    CycleBasis {
        cycles,
        kind: BasisKind::Fundamental,
    }
}

// ---------------------------------------------------------------------------
// Minimum cycle basis (Horton)
// ---------------------------------------------------------------------------

/// Shortest-path tree from `source`. Ties in length are broken by the
/// lexicographically smallest edge-id sequence, which makes every chosen path
/// unique and prefix-closed.
fn shortest_paths(
    g: &OrientedGraph,
    adj: &[Vec<(usize, usize)>],
    weights: &[f64],
    source: usize,
) -> Vec<Option<(f64, Vec<usize>, Vec<usize>)>> {
    // (distance, edge sequence, vertex sequence)
    let n = g.n_vertices;
    let mut best: Vec<Option<(f64, Vec<usize>, Vec<usize>)>> = vec![None; n];
    let mut done = vec![false; n];
    best[source] = Some((0.0, Vec::new(), vec![source]));
    loop {
        let mut pick: Option<usize> = None;
        for v in 0..n {
            if done[v] || best[v].is_none() {
                continue;
            }
            pick = match pick {
                None => Some(v),
                Some(u) => {
                    if path_cmp(best[v].as_ref().unwrap(), best[u].as_ref().unwrap())
                        == Ordering::Less
                    {
                        Some(v)
                    } else {
                        Some(u)
                    }
                }
            };
        }
        let Some(u) = pick else { break };
        done[u] = true;
        let (du, pu, vu) = best[u].clone().unwrap();
        for &(w, e) in &adj[u] {
            if done[w] {
                continue;
            }
            let mut path = pu.clone();
            path.push(e);
            let mut verts = vu.clone();
            verts.push(w);
            let cand = (du + weights[e], path, verts);
            let better = match &best[w] {
                None => true,
                Some(cur) => path_cmp(&cand, cur) == Ordering::Less,
            };
            if better {
                best[w] = Some(cand);
            }
        }
    }
    best
}

fn path_cmp(a: &(f64, Vec<usize>, Vec<usize>), b: &(f64, Vec<usize>, Vec<usize>)) -> Ordering {
    a.0.partial_cmp(&b.0)
        .unwrap_or(Ordering::Equal)
        .then_with(|| a.1.cmp(&b.1))
}

/// Minimum-weight cycle basis. `weights` defaults to one per edge, so the
/// result minimizes the total number of edges over all cycle bases.
///
/// Candidates are Horton cycles `P(v,a) + (a,b) + P(b,v)`, accepted greedily
/// in increasing weight while independent over GF(2).
pub fn minimum_cycle_basis(g: &OrientedGraph, weights: Option<&[f64]>) -> Result<CycleBasis> {
    let unit;
    let weights = match weights {
        Some(w) => {
            if w.len() != g.n_edges() {
                return Err(Error::Dimension(format!(
                    "{} weights for {} edges",
                    w.len(),
                    g.n_edges()
                )));
            }
            if w.iter().any(|x| !(*x > 0.0) || !x.is_finite()) {
                return Err(Error::InvalidParameter("edge weights must be positive".into()));
            }
            w
        }
        None => {
            unit = vec![1.0; g.n_edges()];
            &unit[..]
        }
    };
    let target = g.cyclomatic_number();
    if target == 0 {
        return Ok(CycleBasis {
            cycles: Vec::new(),
            kind: BasisKind::Minimum,
        });
    }

    let adj = g.adjacency();
    let per_source: Vec<Vec<(f64, Vec<usize>)>> = (0..g.n_vertices)
        .into_par_iter()
        .map(|v| {
            let sp = shortest_paths(g, &adj, weights, v);
            let mut out = Vec::new();
            for (e, &(a, b)) in g.edges.iter().enumerate() {
                let (Some(pa), Some(pb)) = (&sp[a], &sp[b]) else {
                    continue;
                };
                if pa.1.contains(&e) || pb.1.contains(&e) {
                    continue;
                }
                // the two paths may only share the source vertex
                let va: HashSet<usize> = pa.2.iter().copied().collect();
                if pb.2.iter().skip(1).any(|x| va.contains(x)) {
                    continue;
                }
                let mut edges: Vec<usize> = pa.1.iter().chain(pb.1.iter()).copied().collect();
                edges.push(e);
                edges.sort_unstable();
                let w = edges.iter().map(|&x| weights[x]).sum();
                out.push((w, edges));
            }
            out
        })
        .collect();

    let mut seen = HashSet::new();
    let mut candidates: Vec<(f64, Vec<usize>)> = per_source
        .into_iter()
        .flatten()
        .filter(|(_, edges)| seen.insert(edges.clone()))
        .collect();
    candidates.sort_by(|a, b| {
        a.0.partial_cmp(&b.0)
            .unwrap_or(Ordering::Equal)
            .then_with(|| a.1.cmp(&b.1))
    });

    let mut elim = Gf2Eliminator::new(g.n_edges());
    let mut cycles = Vec::with_capacity(target);
    for (_, edges) in candidates {
        if elim.insert(&edges) {
            cycles.push(Cycle::canonical(g, &edges)?);
            if cycles.len() == target {
                break;
            }
        }
    }
    debug_assert_eq!(cycles.len(), target);
    Ok(CycleBasis {
        cycles,
        kind: BasisKind::Minimum,
    })
}

// ---------------------------------------------------------------------------
// Indicators and the topology null space
// ---------------------------------------------------------------------------

/// Length-m vector with entries in {-1, 0, +1}.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SignedIndicator(pub Vec<i8>);

impl SignedIndicator {
    /// Entry-wise absolute value.
    pub fn unsigned(&self) -> Vec<u8> {
        self.0.iter().map(|s| s.unsigned_abs()).collect()
    }

    pub fn to_f64(&self) -> Vec<f64> {
        self.0.iter().map(|&s| f64::from(s)).collect()
    }
}

pub fn signed_indicator(cycle: &Cycle, m: usize) -> SignedIndicator {
    let mut v = vec![0i8; m];
    for (&e, &s) in cycle.edge_ids.iter().zip(&cycle.signs) {
        v[e] = s;
    }
    SignedIndicator(v)
}

/// Columns are the unit vectors `ζ_c ⊙ x / ‖ζ_c ⊙ x‖`, one per basis cycle,
/// where `x` is the branch reactance. They span the null space of `Hᵀ`.
pub fn topology_null_space(case: &GridCase, basis: &CycleBasis) -> DMatrix<f64> {
    let m = case.n_branches();
    let x = case.reactances();
    let mut out = DMatrix::zeros(m, basis.len());
    for (j, cycle) in basis.cycles.iter().enumerate() {
        for (&e, &s) in cycle.edge_ids.iter().zip(&cycle.signs) {
            out[(e, j)] = f64::from(s) * x[e];
        }
        let norm = out.column(j).norm();
        out.column_mut(j).unscale_mut(norm);
    }
    out
}

/// Removes every edge that lies on no cycle: pendant trees are stripped leaf
/// by leaf and bridges between cyclic blocks go as well. Returns the pruned
/// graph (same vertex set) and the original ids of the kept edges.
pub fn prune_leaves(g: &OrientedGraph) -> (OrientedGraph, Vec<usize>) {
    let m = g.n_edges();
    let mut alive = vec![true; m];

    // leaf stripping
    let adj = g.adjacency();
    let mut degree: Vec<usize> = adj.iter().map(Vec::len).collect();
    let mut queue: VecDeque<usize> = (0..g.n_vertices).filter(|&v| degree[v] == 1).collect();
    while let Some(v) = queue.pop_front() {
        if degree[v] != 1 {
            continue;
        }
        let Some(&(w, e)) = adj[v].iter().find(|(_, e)| alive[*e]) else {
            continue;
        };
        alive[e] = false;
        degree[v] -= 1;
        degree[w] -= 1;
        if degree[w] == 1 {
            queue.push_back(w);
        }
    }

    // remaining bridges
    for e in 0..m {
        if !alive[e] {
            continue;
        }
        let mut uf = UnionFind::new(g.n_vertices);
        for (f, &(a, b)) in g.edges.iter().enumerate() {
            if f != e && alive[f] {
                uf.union(a, b);
            }
        }
        let (a, b) = g.edges[e];
        if uf.find(a) != uf.find(b) {
            alive[e] = false;
        }
    }

    let kept: Vec<usize> = (0..m).filter(|&e| alive[e]).collect();
    (g.subgraph(&kept), kept)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn triangle() -> OrientedGraph {
        OrientedGraph::new(3, vec![(0, 1), (1, 2), (2, 0)]).unwrap()
    }

    /// Square 0-1-2-3 with diagonal 0-2.
    fn square_with_chord() -> OrientedGraph {
        OrientedGraph::new(4, vec![(0, 1), (1, 2), (2, 3), (3, 0), (0, 2)]).unwrap()
    }

    /// Every simple cycle of a small graph, by subset enumeration.
    fn all_cycles(g: &OrientedGraph) -> Vec<Vec<usize>> {
        let m = g.n_edges();
        assert!(m <= 16);
        (1u32..(1 << m))
            .filter_map(|mask| {
                let edges: Vec<usize> = (0..m).filter(|e| mask >> e & 1 == 1).collect();
                Cycle::canonical(g, &edges).ok().map(|_| edges)
            })
            .collect()
    }

    #[test]
    fn triangle_basics() {
        let g = triangle();
        let fb = fundamental_cycle_basis(&g);
        assert_eq!(fb.len(), 1);
        assert_eq!(fb.cycles[0].len(), 3);
        let mcb = minimum_cycle_basis(&g, None).unwrap();
        assert_eq!(mcb.total_length(), 3);
        let ind = signed_indicator(&mcb.cycles[0], 3);
        assert_eq!(ind.0, vec![1, 1, 1]);

        let flipped = OrientedGraph::new(3, vec![(0, 1), (1, 2), (0, 2)]).unwrap();
        let c = minimum_cycle_basis(&flipped, None).unwrap();
        assert_eq!(signed_indicator(&c.cycles[0], 3).0, vec![1, 1, -1]);
    }

    #[test]
    fn edge_outside_cycle_has_zero_entry() {
        let g = OrientedGraph::new(4, vec![(0, 1), (1, 2), (2, 0), (2, 3)]).unwrap();
        let b = fundamental_cycle_basis(&g);
        let ind = signed_indicator(&b.cycles[0], 4);
        assert_eq!(ind.0[3], 0);
        assert_eq!(ind.unsigned(), vec![1, 1, 1, 0]);
    }

    #[test]
    fn tree_has_empty_bases() {
        let g = OrientedGraph::new(4, vec![(0, 1), (1, 2), (1, 3)]).unwrap();
        assert!(fundamental_cycle_basis(&g).is_empty());
        assert!(minimum_cycle_basis(&g, None).unwrap().is_empty());
        let (pruned, kept) = prune_leaves(&g);
        assert!(kept.is_empty());
        assert_eq!(pruned.n_edges(), 0);
    }

    #[test]
    fn chord_square_mcb_is_two_triangles() {
        let g = square_with_chord();
        let mcb = minimum_cycle_basis(&g, None).unwrap();
        assert_eq!(mcb.lengths(), vec![3, 3]);

        // exhaustive oracle: every pair of independent cycles
        let cycles = all_cycles(&g);
        assert_eq!(cycles.len(), 3);
        let mut best = usize::MAX;
        for i in 0..cycles.len() {
            for j in i + 1..cycles.len() {
                let mut elim = Gf2Eliminator::new(5);
                if elim.insert(&cycles[i]) && elim.insert(&cycles[j]) {
                    best = best.min(cycles[i].len() + cycles[j].len());
                }
            }
        }
        assert_eq!(best, 6);
        assert_eq!(mcb.total_length(), best);
    }

    #[test]
    fn parallel_pair_gives_two_cycle() {
        let g = OrientedGraph::new(3, vec![(0, 1), (0, 1), (1, 2)]).unwrap();
        let mcb = minimum_cycle_basis(&g, None).unwrap();
        assert_eq!(mcb.len(), 1);
        assert_eq!(mcb.cycles[0].sorted_edges(), vec![0, 1]);
        // edges 0 and 1 are both 0->1, so they run in opposite directions
        assert_eq!(signed_indicator(&mcb.cycles[0], 3).0, vec![1, -1, 0]);
        assert_eq!(fundamental_cycle_basis(&g).cycles[0].len(), 2);
    }

    #[test]
    fn fundamental_cycle_starts_with_non_tree_edge() {
        let g = square_with_chord();
        let fb = fundamental_cycle_basis(&g);
        assert_eq!(fb.len(), 2);
        for c in &fb.cycles {
            assert_eq!(c.signs()[0], 1);
        }
        assert_eq!(fb.gf2_rank(5), 2);
    }

    #[test]
    fn from_edge_set_rejects_non_cycles() {
        let g = square_with_chord();
        assert!(Cycle::canonical(&g, &[0, 1]).is_err());
        assert!(Cycle::canonical(&g, &[0, 1, 2, 3, 4]).is_err());
        assert!(Cycle::canonical(&g, &[0]).is_err());
        // two disjoint triangles sharing nothing
        let two = OrientedGraph::new(6, vec![(0, 1), (1, 2), (2, 0), (3, 4), (4, 5), (5, 3)]).unwrap();
        assert!(Cycle::canonical(&two, &[0, 1, 2, 3, 4, 5]).is_err());
    }

    #[test]
    fn prune_keeps_only_cycle_edges() {
        // triangle + pendant edge
        let g = OrientedGraph::new(4, vec![(0, 1), (1, 2), (2, 0), (2, 3)]).unwrap();
        let (pruned, kept) = prune_leaves(&g);
        assert_eq!(kept, vec![0, 1, 2]);
        assert_eq!(pruned.n_edges(), 3);

        // two triangles joined by a bridge
        let g = OrientedGraph::new(
            6,
            vec![(0, 1), (1, 2), (2, 0), (2, 3), (3, 4), (4, 5), (5, 3)],
        )
        .unwrap();
        let (_, kept) = prune_leaves(&g);
        assert_eq!(kept, vec![0, 1, 2, 4, 5, 6]);
    }

    #[test]
    fn forests_are_handled_per_component() {
        let g = OrientedGraph::new(7, vec![(0, 1), (1, 2), (2, 0), (3, 4), (4, 5), (5, 3), (5, 6)]).unwrap();
        assert_eq!(g.components(), 2);
        assert_eq!(g.cyclomatic_number(), 2);
        assert_eq!(fundamental_cycle_basis(&g).len(), 2);
        assert_eq!(minimum_cycle_basis(&g, None).unwrap().total_length(), 6);
    }

    #[test]
    fn weighted_mcb_prefers_light_cycles() {
        // square with chord; make the chord heavy so the square wins
        let g = square_with_chord();
        let w = [1.0, 1.0, 1.0, 1.0, 10.0];
        let mcb = minimum_cycle_basis(&g, Some(&w)).unwrap();
        let mut weights: Vec<f64> = mcb.cycles.iter().map(|c| c.weight(&w)).collect();
        weights.sort_by(f64::total_cmp);
        assert_eq!(weights, vec![4.0, 12.0]);
        assert!(minimum_cycle_basis(&g, Some(&[1.0; 3])).is_err());
    }

    fn random_connected_graph(rng: &mut impl Rng, n: usize, extra: usize) -> OrientedGraph {
        let mut edges = Vec::new();
        for v in 1..n {
            let u = rng.random_range(0..v);
            edges.push(if rng.random_bool(0.5) { (u, v) } else { (v, u) });
        }
        for _ in 0..extra {
            let a = rng.random_range(0..n);
            let mut b = rng.random_range(0..n);
            while b == a {
                b = rng.random_range(0..n);
            }
            edges.push((a, b));
        }
        edges.shuffle(rng);
        OrientedGraph::new(n, edges).unwrap()
    }

    /// Greedy over *all* simple cycles yields a minimum basis (matroid), so it
    /// is an independent check on the Horton candidate set.
    fn brute_force_mcb_weight(g: &OrientedGraph, w: &[f64]) -> f64 {
        let mut cycles = all_cycles(g);
        cycles.sort_by(|a, b| {
            let wa: f64 = a.iter().map(|&e| w[e]).sum();
            let wb: f64 = b.iter().map(|&e| w[e]).sum();
            wa.total_cmp(&wb)
        });
        let mut elim = Gf2Eliminator::new(g.n_edges());
        cycles
            .iter()
            .filter(|c| elim.insert(c))
            .map(|c| c.iter().map(|&e| w[e]).sum::<f64>())
            .sum()
    }

    #[test]
    fn horton_matches_exhaustive_oracle_on_random_graphs() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        for trial in 0..60 {
            let n = rng.random_range(3..8);
            let extra = rng.random_range(1..(14 - n + 1).min(7));
            let g = random_connected_graph(&mut rng, n, extra);
            let unit = vec![1.0; g.n_edges()];
            let mcb = minimum_cycle_basis(&g, None).unwrap();
            assert_eq!(mcb.len(), g.cyclomatic_number(), "trial {trial}");
            assert_eq!(mcb.gf2_rank(g.n_edges()), mcb.len());
            assert_eq!(
                mcb.total_length() as f64,
                brute_force_mcb_weight(&g, &unit),
                "trial {trial}: {:?}",
                g.edges
            );

            let w: Vec<f64> = (0..g.n_edges()).map(|_| rng.random_range(1..5) as f64).collect();
            let wmcb = minimum_cycle_basis(&g, Some(&w)).unwrap();
            let total: f64 = wmcb.cycles.iter().map(|c| c.weight(&w)).sum();
            assert_eq!(total, brute_force_mcb_weight(&g, &w), "weighted trial {trial}");

            let fb = random_fundamental_basis(&g, &mut rng);
            assert_eq!(fb.len(), mcb.len());
            assert_eq!(fb.gf2_rank(g.n_edges()), fb.len());
            assert!(mcb.total_length() <= fb.total_length());
        }
    }

    #[test]
    fn mcb_is_deterministic() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        let g = random_connected_graph(&mut rng, 12, 10);
        assert_eq!(
            minimum_cycle_basis(&g, None).unwrap(),
            minimum_cycle_basis(&g, None).unwrap()
        );
    }
}
