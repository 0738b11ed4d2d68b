//! Minimum spanning tree over observed variables and the local groups formed
//! by closed MST neighborhoods.

use std::cmp::Ordering;
use std::collections::BTreeMap;
use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::distances::DistanceMatrix;
use crate::error::{Error, Result};

/// Strict edge order: weight, then smaller endpoint, then larger endpoint.
fn edge_key_cmp(a: (f64, usize, usize), b: (f64, usize, usize)) -> Ordering {
    a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2))
}

fn key(d: &DistanceMatrix, a: usize, b: usize) -> (f64, usize, usize) {
    (d.get(a, b), a.min(b), a.max(b))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MstGraph {
    p: usize,
    /// `(min, max, weight)`, sorted by endpoints.
    edges: Vec<(usize, usize, f64)>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MstAlgorithm {
    /// Serial Prim.
    #[default]
    Prim,
    /// Borůvka rounds with parallel cheapest-edge search.
    Boruvka,
}

impl MstGraph {
    /// Builds a graph from explicit edges; used by tests and tools.
    pub fn from_edges(p: usize, edges: impl IntoIterator<Item = (usize, usize, f64)>) -> Result<Self> {
        let mut e: Vec<(usize, usize, f64)> = edges.into_iter().map(|(a, b, w)| (a.min(b), a.max(b), w)).collect();
        e.sort_by(|x, y| (x.0, x.1).cmp(&(y.0, y.1)));
        let g = Self { p, edges: e };
        if g.edges.len() + 1 != p.max(1) || g.components().len() != 1 {
            return Err(Error::Structure("edges do not form a spanning tree".into()));
        }
        Ok(g)
    }

    pub fn num_nodes(&self) -> usize {
        self.p
    }

    pub fn edges(&self) -> &[(usize, usize, f64)] {
        &self.edges
    }

    pub fn total_weight(&self) -> f64 {
        self.edges.iter().map(|e| e.2).sum()
    }

    pub fn neighbors(&self, v: usize) -> Vec<usize> {
        let mut n: Vec<usize> = self
            .edges
            .iter()
            .filter_map(|&(a, b, _)| if a == v { Some(b) } else if b == v { Some(a) } else { None })
            .collect();
        n.sort_unstable();
        n
    }

    pub fn degree(&self, v: usize) -> usize {
        self.edges.iter().filter(|&&(a, b, _)| a == v || b == v).count()
    }

    pub fn has_edge(&self, a: usize, b: usize) -> bool {
        let (a, b) = (a.min(b), a.max(b));
        self.edges.iter().any(|&(x, y, _)| x == a && y == b)
    }

    fn components(&self) -> Vec<Vec<usize>> {
        let mut uf = UnionFind::new(self.p);
        for &(a, b, _) in &self.edges {
            uf.union(a, b);
        }
        uf.groups()
    }

    /// Graphviz rendering with weights to six significant digits.
    pub fn to_dot(&self) -> String {
        let mut s = String::from("graph mst {\n");
        for v in 0..self.p {
            let _ = writeln!(s, "  {v};");
        }
        for &(a, b, w) in &self.edges {
            let _ = writeln!(s, "  {a} -- {b} [label=\"{}\"];", six_significant(w));
        }
        s.push_str("}\n");
        s
    }
}

fn six_significant(w: f64) -> String {
    if w == 0.0 || !w.is_finite() {
        return format!("{w}");
    }
    let digits = 5 - w.abs().log10().floor() as i32;
    if (0..=17).contains(&digits) {
        format!("{:.*}", digits as usize, w)
    } else {
        format!("{w:.5e}")
    }
}

pub(crate) struct UnionFind {
    parent: Vec<usize>,
}

impl UnionFind {
    pub(crate) fn new(n: usize) -> Self {
        Self { parent: (0..n).collect() }
    }

    pub(crate) fn find(&mut self, mut x: usize) -> usize {
        while self.parent[x] != x {
            self.parent[x] = self.parent[self.parent[x]];
            x = self.parent[x];
        }
        x
    }

    /// Joins the sets; the smaller root id becomes the representative.
    pub(crate) fn union(&mut self, a: usize, b: usize) -> bool {
        let (ra, rb) = (self.find(a), self.find(b));
        if ra == rb {
            return false;
        }
        let (lo, hi) = (ra.min(rb), ra.max(rb));
        self.parent[hi] = lo;
        true
    }

    /// Sets as sorted member lists, ordered by smallest member.
    pub(crate) fn groups(&mut self) -> Vec<Vec<usize>> {
        let mut by_root: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
        for v in 0..self.parent.len() {
            let r = self.find(v);
            by_root.entry(r).or_default().push(v);
        }
        by_root.into_values().collect()
    }
}

fn disconnected(d: &DistanceMatrix) -> Error {
    let mut uf = UnionFind::new(d.len());
    for a in 0..d.len() {
        for b in a + 1..d.len() {
            if d.get(a, b).is_finite() {
                uf.union(a, b);
            }
        }
    }
    Error::Disconnected { components: uf.groups() }
}

fn check_input(d: &DistanceMatrix) -> Result<()> {
    if d.as_slice().iter().any(|x| x.is_nan()) {
        return Err(Error::NonFinite("distance matrix".into()));
    }
    Ok(())
}

/// Minimum spanning tree under the strict order (weight, min id, max id),
/// which makes the result unique. Infinite distances are non-edges.
pub fn build_mst(d: &DistanceMatrix) -> Result<MstGraph> {
    build_mst_with(d, MstAlgorithm::Prim)
}

pub fn build_mst_with(d: &DistanceMatrix, algorithm: MstAlgorithm) -> Result<MstGraph> {
    check_input(d)?;
    let p = d.len();
    if p == 0 {
        return Ok(MstGraph { p, edges: Vec::new() });
    }
    let mut edges = match algorithm {
        MstAlgorithm::Prim => prim(d).ok_or_else(|| disconnected(d))?,
        MstAlgorithm::Boruvka => boruvka(d).ok_or_else(|| disconnected(d))?,
    };
    edges.sort_by(|x, y| (x.0, x.1).cmp(&(y.0, y.1)));
    Ok(MstGraph { p, edges })
}

fn prim(d: &DistanceMatrix) -> Option<Vec<(usize, usize, f64)>> {
    let p = d.len();
    let mut in_tree = vec![false; p];
    let mut best: Vec<Option<(f64, usize, usize)>> = vec![None; p];
    let mut edges = Vec::with_capacity(p - 1);
    in_tree[0] = true;
    let relax = |best: &mut Vec<Option<(f64, usize, usize)>>, in_tree: &[bool], v: usize| {
        for u in 0..p {
            if in_tree[u] || !d.get(v, u).is_finite() {
                continue;
            }
            let cand = key(d, v, u);
            if best[u].is_none_or(|b| edge_key_cmp(cand, b) == Ordering::Less) {
                best[u] = Some(cand);
            }
        }
    };
    relax(&mut best, &in_tree, 0);
    for _ in 1..p {
        let next = (0..p)
            .filter(|&u| !in_tree[u])
            .filter_map(|u| best[u].map(|k| (k, u)))
            .min_by(|x, y| edge_key_cmp(x.0, y.0))?;
        let ((w, a, b), u) = next;
        in_tree[u] = true;
        edges.push((a, b, w));
        relax(&mut best, &in_tree, u);
    }
    Some(edges)
}

fn boruvka(d: &DistanceMatrix) -> Option<Vec<(usize, usize, f64)>> {
    let p = d.len();
    let mut uf = UnionFind::new(p);
    let mut edges = Vec::with_capacity(p - 1);
    while edges.len() + 1 < p {
        let comp: Vec<usize> = (0..p).map(|v| uf.find(v)).collect();
        let cheapest: Vec<Option<(f64, usize, usize)>> = (0..p)
            .into_par_iter()
            .map(|v| {
                (0..p)
                    .filter(|&u| comp[u] != comp[v] && d.get(v, u).is_finite())
                    .map(|u| key(d, v, u))
                    .min_by(|x, y| edge_key_cmp(*x, *y))
            })
            .collect();
        let mut per_comp: BTreeMap<usize, (f64, usize, usize)> = BTreeMap::new();
        for v in 0..p {
            if let Some(k) = cheapest[v] {
                let e = per_comp.entry(comp[v]).or_insert(k);
                if edge_key_cmp(k, *e) == Ordering::Less {
                    *e = k;
                }
            }
        }
        if per_comp.is_empty() {
            return None;
        }
        let mut added = false;
        for (w, a, b) in per_comp.into_values() {
            if uf.union(a, b) {
                edges.push((a, b, w));
                added = true;
            }
        }
        if !added {
            return None;
        }
    }
    Some(edges)
}

/// An internal MST node and its MST neighbors.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Group {
    pub leader: usize,
    /// Sorted, including the leader.
    pub members: Vec<usize>,
}

/// One group per internal node, leaders in ascending order.
pub fn extract_groups(mst: &MstGraph) -> Result<Vec<Group>> {
    if mst.num_nodes() < 3 {
        return Err(Error::InvalidArgument(format!(
            "need at least 3 nodes to form groups, got {}",
            mst.num_nodes()
        )));
    }
    Ok((0..mst.num_nodes())
        .filter_map(|v| {
            let nbrs = mst.neighbors(v);
            (nbrs.len() >= 2).then(|| {
                let mut members = nbrs;
                members.push(v);
                members.sort_unstable();
                Group { leader: v, members }
            })
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GroupStats {
    /// Largest closed neighborhood size.
    pub gamma: usize,
    /// MST degree → number of nodes.
    pub degree_histogram: BTreeMap<usize, usize>,
}

pub fn group_stats(mst: &MstGraph) -> GroupStats {
    let mut degree_histogram = BTreeMap::new();
    let mut gamma = 0;
    for v in 0..mst.num_nodes() {
        let deg = mst.degree(v);
        *degree_histogram.entry(deg).or_insert(0) += 1;
        gamma = gamma.max(deg + 1);
    }
    GroupStats { gamma, degree_histogram }
}
