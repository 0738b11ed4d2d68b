use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::fmt::Write as _;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{min_singular_value, Permutation};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum NodeKind {
    #[serde(rename = "obs")]
    Observed,
    #[serde(rename = "hid")]
    Hidden,
}

/// A node identifier together with its kind. Observed indices are `0..p`,
/// hidden indices come after every observed index.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId {
    pub index: usize,
    pub kind: NodeKind,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Node {
    pub id: usize,
    pub kind: NodeKind,
    pub dim: usize,
}

/// Undirected tree over observed and hidden nodes with optional
/// conditional-mean parameters.
///
/// `params[(parent, child)]` stores `E[y_child | y_parent]` as a
/// `dim(child) × dim(parent)` matrix; for a hidden parent column `r` is the
/// conditional mean given hidden state `r`. Hidden-hidden edges can be read in
/// either direction through [`LatentTree::conditional`].
#[derive(Debug, Clone, PartialEq)]
pub struct LatentTree {
    pub k: usize,
    nodes: BTreeMap<usize, Node>,
    adjacency: BTreeMap<usize, BTreeSet<usize>>,
    params: BTreeMap<(usize, usize), DMatrix<f64>>,
    priors: BTreeMap<usize, DVector<f64>>,
}

pub const PRIOR_SUM_TOL: f64 = 1e-12;

impl LatentTree {
    pub fn new(k: usize) -> Self {
        Self {
            k,
            nodes: BTreeMap::new(),
            adjacency: BTreeMap::new(),
            params: BTreeMap::new(),
            priors: BTreeMap::new(),
        }
    }

    pub fn add_observed(&mut self, id: usize, dim: usize) {
        self.nodes.insert(id, Node { id, kind: NodeKind::Observed, dim });
        self.adjacency.entry(id).or_default();
    }

    pub fn add_hidden(&mut self, id: usize) {
        self.nodes.insert(id, Node { id, kind: NodeKind::Hidden, dim: self.k });
        self.adjacency.entry(id).or_default();
    }

    pub fn remove_node(&mut self, id: usize) {
        if let Some(nbrs) = self.adjacency.remove(&id) {
            for n in nbrs {
                self.adjacency.get_mut(&n).map(|s| s.remove(&id));
                self.params.remove(&(id, n));
                self.params.remove(&(n, id));
            }
        }
        self.nodes.remove(&id);
        self.priors.remove(&id);
    }

    pub fn add_edge(&mut self, a: usize, b: usize) -> Result<()> {
        if a == b {
            return Err(Error::Structure(format!("self loop on node {a}")));
        }
        for v in [a, b] {
            if !self.nodes.contains_key(&v) {
                return Err(Error::UnknownNode(v));
            }
        }
        self.adjacency.get_mut(&a).unwrap().insert(b);
        self.adjacency.get_mut(&b).unwrap().insert(a);
        Ok(())
    }

    pub fn remove_edge(&mut self, a: usize, b: usize) {
        self.adjacency.get_mut(&a).map(|s| s.remove(&b));
        self.adjacency.get_mut(&b).map(|s| s.remove(&a));
        self.params.remove(&(a, b));
        self.params.remove(&(b, a));
    }

    pub fn has_edge(&self, a: usize, b: usize) -> bool {
        self.adjacency.get(&a).is_some_and(|s| s.contains(&b))
    }

    pub fn node(&self, id: usize) -> Option<&Node> {
        self.nodes.get(&id)
    }

    pub fn contains(&self, id: usize) -> bool {
        self.nodes.contains_key(&id)
    }

    pub fn nodes(&self) -> impl Iterator<Item = &Node> {
        self.nodes.values()
    }

    pub fn num_nodes(&self) -> usize {
        self.nodes.len()
    }

    pub fn dim(&self, id: usize) -> Result<usize> {
        self.nodes.get(&id).map(|n| n.dim).ok_or(Error::UnknownNode(id))
    }

    pub fn is_observed(&self, id: usize) -> bool {
        self.nodes.get(&id).is_some_and(|n| n.kind == NodeKind::Observed)
    }

    pub fn is_hidden(&self, id: usize) -> bool {
        self.nodes.get(&id).is_some_and(|n| n.kind == NodeKind::Hidden)
    }

    pub fn observed_ids(&self) -> Vec<usize> {
        self.nodes.values().filter(|n| n.kind == NodeKind::Observed).map(|n| n.id).collect()
    }

    pub fn hidden_ids(&self) -> Vec<usize> {
        self.nodes.values().filter(|n| n.kind == NodeKind::Hidden).map(|n| n.id).collect()
    }

    pub fn node_ids(&self) -> Vec<usize> {
        self.nodes.keys().copied().collect()
    }

    pub fn neighbors(&self, id: usize) -> impl Iterator<Item = usize> + '_ {
        self.adjacency.get(&id).into_iter().flat_map(|s| s.iter().copied())
    }

    pub fn degree(&self, id: usize) -> usize {
        self.adjacency.get(&id).map_or(0, |s| s.len())
    }

    /// Edges as `(min, max)` pairs in ascending order.
    pub fn edges(&self) -> Vec<(usize, usize)> {
        self.adjacency
            .iter()
            .flat_map(|(&a, s)| s.iter().filter(move |&&b| a < b).map(move |&b| (a, b)))
            .collect()
    }

    pub fn num_edges(&self) -> usize {
        self.adjacency.values().map(|s| s.len()).sum::<usize>() / 2
    }

    pub fn set_param(&mut self, parent: usize, child: usize, m: DMatrix<f64>) -> Result<()> {
        if !self.has_edge(parent, child) {
            return Err(Error::Structure(format!("no edge {parent}-{child} for parameter")));
        }
        let want = (self.dim(child)?, self.dim(parent)?);
        if m.shape() != want {
            return Err(Error::Dimension(format!(
                "parameter {parent}->{child} is {:?}, expected {:?}",
                m.shape(),
                want
            )));
        }
        self.params.remove(&(child, parent));
        self.params.insert((parent, child), m);
        Ok(())
    }

    pub fn param(&self, parent: usize, child: usize) -> Option<&DMatrix<f64>> {
        self.params.get(&(parent, child))
    }

    pub fn params(&self) -> &BTreeMap<(usize, usize), DMatrix<f64>> {
        &self.params
    }

    pub fn set_prior(&mut self, h: usize, pi: DVector<f64>) -> Result<()> {
        if !self.is_hidden(h) {
            return Err(Error::Structure(format!("prior on non-hidden node {h}")));
        }
        if pi.len() != self.k {
            return Err(Error::Dimension(format!("prior of length {} for k={}", pi.len(), self.k)));
        }
        self.priors.insert(h, pi);
        Ok(())
    }

    pub fn prior(&self, h: usize) -> Option<&DVector<f64>> {
        self.priors.get(&h)
    }

    pub fn priors(&self) -> &BTreeMap<usize, DVector<f64>> {
        &self.priors
    }

    /// `E[y_to | y_from]` for adjacent nodes. A stored hidden-hidden parameter is
    /// reversed with Bayes' rule when read against its orientation.
    pub fn conditional(&self, from: usize, to: usize) -> Result<DMatrix<f64>> {
        if let Some(m) = self.params.get(&(from, to)) {
            return Ok(m.clone());
        }
        if let Some(m) = self.params.get(&(to, from)) {
            if let (Some(p_from), Some(p_to)) = (self.priors.get(&from), self.priors.get(&to)) {
                return Ok(bayes_reverse(m, p_to, p_from));
            }
            return Err(Error::Structure(format!(
                "cannot reverse parameter {to}->{from} without hidden priors on both ends"
            )));
        }
        Err(Error::Structure(format!("no parameter on edge {from}-{to}")))
    }

    /// Node sequence from `a` to `b` (inclusive).
    pub fn path(&self, a: usize, b: usize) -> Result<Vec<usize>> {
        for v in [a, b] {
            if !self.contains(v) {
                return Err(Error::UnknownNode(v));
            }
        }
        let mut prev: BTreeMap<usize, usize> = BTreeMap::new();
        let mut queue = VecDeque::from([a]);
        prev.insert(a, a);
        while let Some(v) = queue.pop_front() {
            if v == b {
                break;
            }
            for n in self.neighbors(v) {
                if let std::collections::btree_map::Entry::Vacant(e) = prev.entry(n) {
                    e.insert(v);
                    queue.push_back(n);
                }
            }
        }
        if !prev.contains_key(&b) {
            return Err(Error::Structure(format!("nodes {a} and {b} are not connected")));
        }
        let mut path = vec![b];
        let mut cur = b;
        while cur != a {
            cur = prev[&cur];
            path.push(cur);
        }
        path.reverse();
        Ok(path)
    }

    /// Product of conditionals along the path, i.e. `E[y_to | y_from]`.
    pub fn path_conditional(&self, from: usize, to: usize) -> Result<DMatrix<f64>> {
        let path = self.path(from, to)?;
        let mut acc = DMatrix::identity(self.dim(from)?, self.dim(from)?);
        for w in path.windows(2) {
            acc = self.conditional(w[0], w[1])? * acc;
        }
        Ok(acc)
    }

    pub fn is_connected(&self) -> bool {
        let Some(&start) = self.nodes.keys().next() else {
            return true;
        };
        let mut seen = BTreeSet::from([start]);
        let mut stack = vec![start];
        while let Some(v) = stack.pop() {
            for n in self.neighbors(v) {
                if seen.insert(n) {
                    stack.push(n);
                }
            }
        }
        seen.len() == self.nodes.len()
    }

    pub fn is_tree(&self) -> bool {
        !self.nodes.is_empty() && self.num_edges() + 1 == self.nodes.len() && self.is_connected()
    }

    /// Observed leaves reachable from `start` without crossing `blocked`.
    pub fn observed_in_branch(&self, start: usize, blocked: usize) -> Vec<usize> {
        let mut out = Vec::new();
        let mut stack = vec![(start, blocked)];
        while let Some((v, from)) = stack.pop() {
            if self.is_observed(v) {
                out.push(v);
            }
            for n in self.neighbors(v) {
                if n != from {
                    stack.push((n, v));
                }
            }
        }
        out.sort_unstable();
        out
    }

    /// Checks the structural invariants: a tree, every hidden node of degree at
    /// least three, full-column-rank parameters and normalized positive priors.
    pub fn check_invariants(&self) -> Result<()> {
        if !self.is_tree() {
            return Err(Error::Structure("edge set is not a spanning tree".into()));
        }
        for h in self.hidden_ids() {
            if self.degree(h) < 3 {
                return Err(Error::Structure(format!(
                    "hidden node {h} has degree {}",
                    self.degree(h)
                )));
            }
        }
        for (&(parent, child), m) in &self.params {
            let cols = m.ncols().min(self.k);
            if m.nrows() < cols || min_singular_value(m) <= 1e-12 {
                return Err(Error::ModelViolation(format!(
                    "parameter {parent}->{child} is not of full column rank"
                )));
            }
        }
        for (&h, pi) in &self.priors {
            let sum: f64 = pi.iter().sum();
            if pi.iter().any(|&x| x <= 0.0) || (sum - 1.0).abs() > PRIOR_SUM_TOL * self.k as f64 {
                return Err(Error::ModelViolation(format!("prior of hidden node {h} is not a positive distribution")));
            }
        }
        Ok(())
    }

    /// Relabels hidden states of `h`: new state `r` is old state `perm[r]`.
    pub fn relabel_hidden(&mut self, h: usize, perm: &Permutation) -> Result<()> {
        if !self.is_hidden(h) {
            return Err(Error::Structure(format!("node {h} is not hidden")));
        }
        if perm.len() != self.k || !perm.is_bijection() {
            return Err(Error::InvalidArgument(format!("{perm:?} is not a permutation of {}", self.k)));
        }
        if let Some(pi) = self.priors.get_mut(&h) {
            *pi = perm.permute_vector(pi);
        }
        let nbrs: Vec<usize> = self.neighbors(h).collect();
        for n in nbrs {
            if let Some(m) = self.params.get_mut(&(h, n)) {
                *m = perm.permute_columns(m);
            }
            if let Some(m) = self.params.get_mut(&(n, h)) {
                *m = perm.permute_rows(m);
            }
        }
        Ok(())
    }

    /// A rooted view used by exporters: `(node, parent)` pairs in BFS order.
    pub fn bfs_from(&self, root: usize) -> Vec<(usize, Option<usize>)> {
        let mut out = vec![(root, None)];
        let mut seen = BTreeSet::from([root]);
        let mut i = 0;
        while i < out.len() {
            let v = out[i].0;
            for n in self.neighbors(v) {
                if seen.insert(n) {
                    out.push((n, Some(v)));
                }
            }
            i += 1;
        }
        out
    }

    fn default_root(&self) -> Option<usize> {
        self.hidden_ids().first().copied().or_else(|| self.nodes.keys().next().copied())
    }

    /// Newick string with observed ids as labels; `comment` is emitted in
    /// brackets before the terminating semicolon.
    pub fn to_newick(&self, comment: Option<&str>) -> String {
        let mut s = String::new();
        if let Some(root) = self.default_root() {
            self.newick_rec(root, None, &mut s);
        }
        if let Some(c) = comment {
            let clean: String = c.chars().map(|ch| match ch {
                '[' => '(',
                ']' => ')',
                other => other,
            }).collect();
            let _ = write!(s, "[{clean}]");
        }
        s.push(';');
        s
    }

    fn newick_rec(&self, v: usize, parent: Option<usize>, out: &mut String) {
        let children: Vec<usize> = self.neighbors(v).filter(|&n| Some(n) != parent).collect();
        if !children.is_empty() {
            out.push('(');
            for (i, c) in children.iter().enumerate() {
                if i > 0 {
                    out.push(',');
                }
                self.newick_rec(*c, Some(v), out);
            }
            out.push(')');
        }
        if self.is_observed(v) {
            let _ = write!(out, "{v}");
        }
    }

    /// Graphviz rendering; observed nodes are boxes, hidden nodes circles.
    pub fn to_dot(&self, comment: Option<&str>) -> String {
        let mut s = String::new();
        if let Some(c) = comment {
            for line in c.lines() {
                let _ = writeln!(s, "// {line}");
            }
        }
        s.push_str("graph latent_tree {\n");
        for n in self.nodes.values() {
            match n.kind {
                NodeKind::Observed => {
                    let _ = writeln!(s, "  {} [shape=box, label=\"x{}\"];", n.id, n.id);
                }
                NodeKind::Hidden => {
                    let _ = writeln!(s, "  {} [shape=circle, label=\"h{}\"];", n.id, n.id);
                }
            }
        }
        for (a, b) in self.edges() {
            let _ = writeln!(s, "  {a} -- {b};");
        }
        s.push_str("}\n");
        s
    }

    pub fn to_json(&self) -> TreeJson {
        TreeJson {
            k: self.k,
            nodes: self.nodes.values().copied().collect(),
            edges: self.edges().into_iter().map(|(a, b)| [a, b]).collect(),
            params: self
                .params
                .iter()
                .map(|(&(a, b), m)| {
                    let rows = (0..m.nrows()).map(|i| m.row(i).iter().copied().collect()).collect();
                    (format!("{a}-{b}"), rows)
                })
                .collect(),
            priors: self
                .priors
                .iter()
                .map(|(&h, pi)| (h.to_string(), pi.iter().copied().collect()))
                .collect(),
        }
    }

    pub fn from_json(j: &TreeJson) -> Result<Self> {
        let mut t = LatentTree::new(j.k);
        for n in &j.nodes {
            match n.kind {
                NodeKind::Observed => t.add_observed(n.id, n.dim),
                NodeKind::Hidden => {
                    if n.dim != j.k {
                        return Err(Error::Dimension(format!("hidden node {} has dim {}", n.id, n.dim)));
                    }
                    t.add_hidden(n.id)
                }
            }
        }
        for [a, b] in &j.edges {
            t.add_edge(*a, *b)?;
        }
        for (key, rows) in &j.params {
            let (a, b) = key
                .split_once('-')
                .and_then(|(a, b)| Some((a.parse::<usize>().ok()?, b.parse::<usize>().ok()?)))
                .ok_or_else(|| Error::InvalidArgument(format!("bad parameter key {key:?}")))?;
            let nrows = rows.len();
            let ncols = rows.first().map_or(0, |r| r.len());
            if rows.iter().any(|r| r.len() != ncols) {
                return Err(Error::Dimension(format!("ragged parameter matrix {key}")));
            }
            let m = DMatrix::from_fn(nrows, ncols, |i, jx| rows[i][jx]);
            t.set_param(a, b, m)?;
        }
        for (key, pi) in &j.priors {
            let h: usize = key
                .parse()
                .map_err(|_| Error::InvalidArgument(format!("bad prior key {key:?}")))?;
            t.set_prior(h, DVector::from_vec(pi.clone()))?;
        }
        Ok(t)
    }
}

/// Given `m = E[b | a]` (columns over states of `a`) and the priors of both
/// hidden nodes, returns `E[a | b]`.
pub fn bayes_reverse(m: &DMatrix<f64>, pi_a: &DVector<f64>, pi_b: &DVector<f64>) -> DMatrix<f64> {
    DMatrix::from_fn(m.ncols(), m.nrows(), |r, s| {
        if pi_b[s] > 0.0 {
            m[(s, r)] * pi_a[r] / pi_b[s]
        } else {
            0.0
        }
    })
}

/// Serialized form of a [`LatentTree`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TreeJson {
    pub k: usize,
    pub nodes: Vec<Node>,
    pub edges: Vec<[usize; 2]>,
    #[serde(default)]
    pub params: BTreeMap<String, Vec<Vec<f64>>>,
    #[serde(default)]
    pub priors: BTreeMap<String, Vec<f64>>,
}
