//! Local recursive grouping: recovers the latent subtree over one MST group
//! with Φ tests, introduces hidden parents bottom-up and estimates every new
//! edge's conditional means by triplet decomposition.
//!
//! A hidden node `h` is read through a proxy: an observed descendant `q` with
//! known `E[y_q | h]`, projected by `P = E[y_q | h]⁺` so that `E[P y_q | h]` is
//! the one-hot state of `h`. Moments involving hidden nodes are therefore
//! multilinear transforms of observed moments.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::distances::{log_normalizer, pair_seed, DistanceMatrix, SINGULARITY_FLOOR};
use crate::error::{Error, Result};
use crate::linalg::{pinv_full, pinv_rank};
use crate::merge::align_in_group;
use crate::model::{LatentTree, ObservationFamily, TreeJson};
use crate::moments::MomentSource;
use crate::mst::{Group, UnionFind};
use crate::tensor::{decompose_triplet, posterior_hidden, TensorOptions, TripletMoments, TripletParams};

pub const AUTO_EPSILON_FACTOR: f64 = 0.2;

/// Slack for the Φ equality tests.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Epsilon {
    /// `0.2 ×` the smallest observed distance inside the group.
    Auto,
    Fixed(f64),
}

impl std::str::FromStr for Epsilon {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s == "auto" {
            return Ok(Self::Auto);
        }
        match s.parse::<f64>() {
            Ok(v) if v >= 0.0 && v.is_finite() => Ok(Self::Fixed(v)),
            _ => Err(Error::InvalidArgument(format!("epsilon must be 'auto' or a non-negative number, got {s:?}"))),
        }
    }
}

/// How distances from a new hidden node to the remaining active nodes are
/// obtained.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum HiddenDistance {
    /// `E[h yᵀ]` assembled from the estimated prior and conditional means.
    #[default]
    Moment,
    /// Additive estimates from witness-averaged Φ.
    Additive,
    /// `E[h yᵀ]` averaged from per-sample posteriors of `h` (needs samples
    /// and a declared observation family).
    Posterior,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LrgOptions {
    pub epsilon: Epsilon,
    pub hidden_distance: HiddenDistance,
    pub tensor: TensorOptions,
    pub family: Option<ObservationFamily>,
    /// When a round finds no relation, group the pair with the most constant
    /// Φ as siblings instead of failing, and floor negative edge estimates
    /// at zero.
    pub fallback: bool,
}

impl Default for LrgOptions {
    fn default() -> Self {
        Self {
            epsilon: Epsilon::Auto,
            hidden_distance: HiddenDistance::Moment,
            tensor: TensorOptions::default(),
            family: None,
            fallback: false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Relation {
    /// The first node is a leaf whose parent is the second.
    ALeafOfB,
    BLeafOfA,
    Siblings,
    Unrelated,
}

/// `Φ(a, b; c) = dist(a, c) − dist(b, c)`.
pub fn phi(a: usize, b: usize, c: usize, d: &DistanceMatrix) -> Result<f64> {
    let (ac, bc) = (d.get(a, c), d.get(b, c));
    if ac.is_infinite() || bc.is_infinite() {
        return Err(Error::IllConditioned(format!("infinite distance in Φ({a},{b};{c})")));
    }
    Ok(ac - bc)
}

/// Classifies `a, b` using every other member of `omega` as a witness.
pub fn classify_pair(a: usize, b: usize, omega: &[usize], d: &DistanceMatrix, eps: f64) -> Relation {
    let dab = d.get(a, b);
    if !dab.is_finite() {
        return Relation::Unrelated;
    }
    let mut phis = Vec::with_capacity(omega.len());
    for &c in omega {
        if c == a || c == b {
            continue;
        }
        match phi(a, b, c, d) {
            Ok(v) => phis.push(v),
            Err(_) => return Relation::Unrelated,
        }
    }
    if phis.is_empty() {
        return Relation::Unrelated;
    }
    if phis.iter().all(|&f| (f - dab).abs() <= eps) {
        return Relation::ALeafOfB;
    }
    if phis.iter().all(|&f| (f + dab).abs() <= eps) {
        return Relation::BLeafOfA;
    }
    let (lo, hi) = phis.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), &f| (l.min(f), h.max(f)));
    if hi - lo <= eps && phis.iter().all(|&f| f > -dab + eps && f < dab - eps) {
        return Relation::Siblings;
    }
    Relation::Unrelated
}

/// Appends a hidden parent of `siblings` to `d`. Sibling edge lengths are
/// `½(d_ij + Φ̄_ij)` averaged over the other siblings, with `Φ̄` averaged over
/// `witnesses`; distances to the other `live` nodes follow by additivity.
/// Returns the new index. An edge length below `-eps` is an error unless
/// `clamp` is set, in which case it is floored at zero.
pub fn introduce_hidden(
    siblings: &[usize],
    witnesses: &[usize],
    live: &[usize],
    d: &mut DistanceMatrix,
    eps: f64,
    clamp: bool,
) -> Result<usize> {
    if siblings.len() < 2 {
        return Err(Error::InvalidArgument("a hidden parent needs at least two siblings".into()));
    }
    let mut edge = Vec::with_capacity(siblings.len());
    for &i in siblings {
        let mut acc = 0.0;
        for &j in siblings.iter().filter(|&&j| j != i) {
            let ws: Vec<usize> = witnesses.iter().copied().filter(|&c| c != i && c != j).collect();
            if ws.is_empty() {
                return Err(Error::InvalidArgument(format!("no witness for siblings {i} and {j}")));
            }
            let mut phi_bar = 0.0;
            for &c in &ws {
                phi_bar += phi(i, j, c, d)?;
            }
            phi_bar /= ws.len() as f64;
            acc += 0.5 * (d.get(i, j) + phi_bar);
        }
        let len = acc / (siblings.len() - 1) as f64;
        if len < -eps {
            if clamp {
                log::warn!("negative edge length {len:.3e} from node {i} to its new parent; using 0");
            } else {
                return Err(Error::ModelViolation(format!("negative edge length {len:.3e} from node {i} to its new parent")));
            }
        }
        edge.push(len.max(0.0));
    }
    let mut row = vec![f64::INFINITY; d.len()];
    for (&i, &len) in siblings.iter().zip(&edge) {
        row[i] = len;
    }
    for &a in live {
        if siblings.contains(&a) {
            continue;
        }
        let mean = siblings.iter().zip(&edge).map(|(&i, &len)| d.get(i, a) - len).sum::<f64>() / siblings.len() as f64;
        row[a] = mean.max(0.0);
    }
    Ok(d.extend(&row))
}

/// How an introduced hidden node came about, kept for debugging dumps.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HiddenInfo {
    pub id: usize,
    pub children: Vec<usize>,
    pub round: usize,
    /// `siblings` for a Φ sibling test, `fallback` for a forced grouping.
    pub test: String,
    /// The triple of views decomposed to create the node.
    pub triplet: [usize; 3],
    pub residual: f64,
    pub proxy: usize,
}

/// Latent subtree over one group. Observed nodes keep their ids; hidden nodes
/// use local ids starting at `p`.
#[derive(Debug, Clone, PartialEq)]
pub struct LocalSubtree {
    pub leader: usize,
    pub members: Vec<usize>,
    pub epsilon: f64,
    pub tree: LatentTree,
    pub hidden: Vec<HiddenInfo>,
    /// Decomposition residual behind each `(parent, child)` parameter.
    pub residuals: BTreeMap<(usize, usize), f64>,
    pub low_confidence: usize,
    pub ambiguous_alignments: usize,
    pub rounds: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LocalSubtreeDump {
    pub leader: usize,
    pub members: Vec<usize>,
    pub epsilon: f64,
    pub hidden: Vec<HiddenInfo>,
    pub tree: TreeJson,
}

impl LocalSubtree {
    pub fn dump(&self) -> LocalSubtreeDump {
        LocalSubtreeDump {
            leader: self.leader,
            members: self.members.clone(),
            epsilon: self.epsilon,
            hidden: self.hidden.clone(),
            tree: self.tree.to_json(),
        }
    }

    pub fn hidden_ids(&self) -> Vec<usize> {
        self.tree.hidden_ids()
    }
}

/// Reading of a node through an observed proxy.
#[derive(Debug, Clone)]
struct View {
    proxy: usize,
    /// `E[y_proxy | h]⁺` for hidden nodes.
    proj: Option<DMatrix<f64>>,
    /// `E[y_proxy | h]` for hidden nodes.
    mean: Option<DMatrix<f64>>,
    /// Distance from the node to its proxy.
    dist: f64,
}

struct Base {
    reference: usize,
    a_ref: DMatrix<f64>,
    second: usize,
}

enum Family {
    Parent { parent: usize, children: Vec<usize> },
    Siblings { members: Vec<usize>, forced: bool },
}

struct State<'a> {
    source: &'a dyn MomentSource,
    opts: &'a LrgOptions,
    k: usize,
    leader: usize,
    eps: f64,
    d: DistanceMatrix,
    /// Distance-matrix index → node id.
    ids: Vec<usize>,
    index: BTreeMap<usize, usize>,
    next_hidden: usize,
    tree: LatentTree,
    views: BTreeMap<usize, View>,
    log_norm: BTreeMap<usize, f64>,
    base: BTreeMap<usize, Base>,
    residuals: BTreeMap<(usize, usize), f64>,
    hidden: Vec<HiddenInfo>,
    decompositions: u64,
    low_confidence: usize,
    ambiguous: usize,
}

impl State<'_> {
    fn dist(&self, a: usize, b: usize) -> f64 {
        self.d.get(self.index[&a], self.index[&b])
    }

    fn set_dist(&mut self, a: usize, b: usize, v: f64) {
        let (ia, ib) = (self.index[&a], self.index[&b]);
        self.d.set(ia, ib, v);
    }

    fn view(&self, v: usize) -> &View {
        &self.views[&v]
    }

    fn is_hidden(&self, v: usize) -> bool {
        self.tree.is_hidden(v)
    }

    /// `E[view_x view_yᵀ]` for nodes in disjoint subtrees.
    fn second(&self, x: usize, y: usize) -> Result<DMatrix<f64>> {
        let (vx, vy) = (self.view(x), self.view(y));
        let m = self.source.second(vx.proxy, vy.proxy)?;
        Ok(match (&vx.proj, &vy.proj) {
            (None, None) => m,
            (Some(px), None) => px * m,
            (None, Some(py)) => m * py.transpose(),
            (Some(px), Some(py)) => px * m * py.transpose(),
        })
    }

    fn decompose(&mut self, views: [usize; 3]) -> Result<TripletParams> {
        let [x, y, z] = views;
        let (vx, vy, vz) = (self.view(x), self.view(y), self.view(z));
        let raw = TripletMoments::from_source(self.source, vx.proxy, vy.proxy, vz.proxy)?;
        let mom = raw.transformed(vx.proj.as_ref(), vy.proj.as_ref(), vz.proj.as_ref());
        let tag = self.decompositions;
        self.decompositions += 1;
        let opts = TensorOptions { seed: pair_seed(self.opts.tensor.seed, self.leader, tag as usize), ..self.opts.tensor };
        let out = decompose_triplet(&mom, self.k, &opts)?;
        if out.low_confidence {
            self.low_confidence += 1;
        }
        Ok(out)
    }

    fn set_param(&mut self, parent: usize, child: usize, m: DMatrix<f64>, residual: f64) -> Result<()> {
        self.tree.add_edge(parent, child)?;
        self.tree.set_param(parent, child, m)?;
        self.residuals.insert((parent, child), residual);
        Ok(())
    }

    /// Decomposes `(c0, c1, x)` around the already parameterized hidden node
    /// `h` and returns `E[view_x | h]` in `h`'s state order.
    fn attach_to_hidden(&mut self, h: usize, x: usize) -> Result<(DMatrix<f64>, f64)> {
        let (reference, second) = (self.base[&h].reference, self.base[&h].second);
        let t = self.decompose([reference, second, x])?;
        let al = align_in_group(&self.base[&h].a_ref, &[&t.a]).remove(0);
        if al.ambiguous {
            self.ambiguous += 1;
        }
        let t = t.permuted(&al.perm);
        Ok((t.c, t.residual))
    }

    /// Linear regression `E[view_x | y_o]` for an observed parent `o`.
    fn regress_on_observed(&self, o: usize, x: usize) -> Result<DMatrix<f64>> {
        let m_xo = self.second(x, o)?;
        let m_oo = self.source.second(o, o)?;
        let rank = m_oo.nrows().min(m_oo.ncols());
        Ok(m_xo * pinv_rank(&m_oo, rank).or_else(|_| pinv_rank(&m_oo, self.k))?)
    }

    fn add_hidden_node(&mut self, row_index: usize) -> usize {
        let id = self.next_hidden;
        self.next_hidden += 1;
        self.tree.add_hidden(id);
        self.ids.push(id);
        self.index.insert(id, row_index);
        id
    }

    /// Parameters, prior, proxy and distances for a new parent of `children`.
    fn estimate_new_hidden(&mut self, h: usize, children: &[usize], omega: &[usize], live: &[usize]) -> Result<([usize; 3], f64)> {
        let (s0, s1) = (children[0], children[1]);
        let third = if children.len() >= 3 {
            children[2]
        } else {
            omega
                .iter()
                .copied()
                .filter(|c| !children.contains(c))
                .min_by(|&x, &y| self.dist(s0, x).total_cmp(&self.dist(s0, y)).then(x.cmp(&y)))
                .ok_or_else(|| Error::InvalidArgument("no node outside the sibling pair".into()))?
        };
        let triplet = [s0, s1, third];
        let base = self.decompose(triplet)?;
        self.set_param(h, s0, base.a.clone(), base.residual)?;
        self.set_param(h, s1, base.b.clone(), base.residual)?;
        if children.len() >= 3 {
            self.set_param(h, third, base.c.clone(), base.residual)?;
        }
        self.tree.set_prior(h, base.pi.clone())?;
        self.log_norm.insert(h, base.pi.iter().map(|x| x.max(SINGULARITY_FLOOR).ln()).sum());
        self.base.insert(h, Base { reference: s0, a_ref: base.a.clone(), second: s1 });
        for &x in children.iter().skip(3) {
            let (m, res) = self.attach_to_hidden(h, x)?;
            self.set_param(h, x, m, res)?;
        }

        if self.opts.hidden_distance != HiddenDistance::Additive {
            for &c in children {
                let a = self.tree.param(h, c).unwrap().clone();
                let m = &a * DMatrix::from_diagonal(self.tree.prior(h).unwrap());
                let dist = self.moment_distance(&m, self.log_norm[&c], self.log_norm[&h])?;
                self.set_dist(h, c, dist);
            }
        }
        self.choose_proxy(h, children)?;
        match self.opts.hidden_distance {
            HiddenDistance::Additive => {}
            HiddenDistance::Moment | HiddenDistance::Posterior => {
                for &a in live {
                    if children.contains(&a) || a == h {
                        continue;
                    }
                    let m = if self.opts.hidden_distance == HiddenDistance::Moment {
                        self.hidden_cross_moment(h, children, a)?
                    } else {
                        self.posterior_cross_moment(h, a)?
                    };
                    let dist = self.moment_distance(&m, self.log_norm[&h], self.log_norm[&a])?;
                    self.set_dist(h, a, dist);
                }
            }
        }
        Ok((triplet, base.residual))
    }

    fn moment_distance(&self, m: &DMatrix<f64>, la: f64, lb: f64) -> Result<f64> {
        let mut s: Vec<f64> = m.singular_values().iter().copied().collect();
        s.sort_by(|a, b| b.total_cmp(a));
        s.truncate(self.k);
        if s.len() < self.k || s[self.k - 1] <= SINGULARITY_FLOOR || !la.is_finite() || !lb.is_finite() {
            return Ok(f64::INFINITY);
        }
        Ok((-s.iter().map(|x| x.ln()).sum::<f64>() + 0.5 * (la + lb)).max(0.0))
    }

    /// `E[h view_aᵀ]` averaged over the children: `E[S_i|h]⁺ E[view_i view_aᵀ]`.
    fn hidden_cross_moment(&self, h: usize, children: &[usize], a: usize) -> Result<DMatrix<f64>> {
        let mut acc: Option<DMatrix<f64>> = None;
        for &c in children {
            let est = pinv_full(self.tree.param(h, c).unwrap())? * self.second(c, a)?;
            acc = Some(match acc {
                Some(x) => x + est,
                None => est,
            });
        }
        Ok(acc.unwrap() / children.len() as f64)
    }

    /// `(1/N) Σ_n P(h | y_q^n) view_a(n)ᵀ` with `q` the proxy of `h`.
    fn posterior_cross_moment(&self, h: usize, a: usize) -> Result<DMatrix<f64>> {
        let samples = self
            .source
            .samples()
            .ok_or_else(|| Error::InvalidArgument("posterior hidden distances need samples".into()))?;
        let family = self
            .opts
            .family
            .ok_or_else(|| Error::InvalidArgument("posterior hidden distances need an observation family".into()))?;
        let vh = self.view(h);
        let va = self.view(a);
        let mean = vh.mean.as_ref().unwrap();
        let pi = self.tree.prior(h).unwrap();
        let n = samples.num_samples();
        if n == 0 {
            return Err(Error::EmptySamples);
        }
        let dq = samples.dim(vh.proxy);
        let da = samples.dim(va.proxy);
        let mut acc = DMatrix::zeros(self.k, da);
        let mut x = DVector::zeros(dq);
        for s in 0..n {
            x.fill(0.0);
            for (i, v) in samples.var(vh.proxy).entries(s) {
                x[i] = v;
            }
            let post = posterior_hidden(&x, mean, pi, family)?;
            for (j, v) in samples.var(va.proxy).entries(s) {
                for r in 0..self.k {
                    acc[(r, j)] += post[r] * v;
                }
            }
        }
        acc /= n as f64;
        Ok(match &va.proj {
            Some(p) => acc * p.transpose(),
            None => acc,
        })
    }

    /// Closest observed descendant reached through the children's proxies.
    fn choose_proxy(&mut self, h: usize, children: &[usize]) -> Result<()> {
        let mut best: Option<(f64, usize)> = None;
        for &c in children {
            let total = self.dist(h, c) + self.view(c).dist;
            if best.is_none_or(|(b, _)| total < b) {
                best = Some((total, c));
            }
        }
        let (dist, c) = best.unwrap();
        let a = self.tree.param(h, c).unwrap();
        let vc = self.view(c);
        let mean = match &vc.mean {
            Some(m) => m * a,
            None => a.clone(),
        };
        let proj = pinv_full(&mean)?;
        let proxy = vc.proxy;
        self.views.insert(h, View { proxy, proj: Some(proj), mean: Some(mean), dist });
        Ok(())
    }

    /// Parameterizes the edge `u`–`v`, oriented away from a hidden endpoint
    /// (the later one when both are hidden).
    fn join(&mut self, u: usize, v: usize) -> Result<()> {
        match (self.is_hidden(u), self.is_hidden(v)) {
            (false, false) => {
                let (a, b) = (u.min(v), u.max(v));
                let m = self.regress_on_observed(a, b)?;
                self.set_param(a, b, m, 0.0)
            }
            (true, false) => {
                let (m, res) = self.attach_to_hidden(u, v)?;
                self.set_param(u, v, m, res)
            }
            (false, true) => {
                let (m, res) = self.attach_to_hidden(v, u)?;
                self.set_param(v, u, m, res)
            }
            (true, true) => {
                let (h, x) = (u.max(v), u.min(v));
                let (m, res) = self.attach_to_hidden(h, x)?;
                self.set_param(h, x, m, res)
            }
        }
    }

    fn families(&self, omega: &[usize]) -> (Vec<Family>, BTreeMap<(usize, usize), Relation>) {
        let idx: Vec<usize> = omega.iter().map(|v| self.index[v]).collect();
        let mut rel = BTreeMap::new();
        let mut uf = UnionFind::new(omega.len());
        for i in 0..omega.len() {
            for j in i + 1..omega.len() {
                let r = classify_pair(idx[i], idx[j], &idx, &self.d, self.eps);
                rel.insert((omega[i], omega[j]), r);
                if r != Relation::Unrelated {
                    uf.union(i, j);
                }
            }
        }
        let mut out = Vec::new();
        for comp in uf.groups() {
            if comp.len() < 2 {
                continue;
            }
            let members: Vec<usize> = comp.iter().map(|&i| omega[i]).collect();
            let is_child_of = |m: usize, p: usize| {
                let key = (m.min(p), m.max(p));
                let r = rel[&key];
                (m < p && r == Relation::ALeafOfB) || (m > p && r == Relation::BLeafOfA)
            };
            let parent = members
                .iter()
                .copied()
                .find(|&p| members.iter().all(|&m| m == p || is_child_of(m, p)));
            out.push(match parent {
                Some(parent) => Family::Parent {
                    parent,
                    children: members.iter().copied().filter(|&m| m != parent).collect(),
                },
                None => Family::Siblings { members, forced: false },
            });
        }
        (out, rel)
    }

    /// Pair whose Φ is most nearly constant across witnesses.
    fn most_sibling_like(&self, omega: &[usize]) -> Option<Vec<usize>> {
        let mut best: Option<(f64, usize, usize)> = None;
        for i in 0..omega.len() {
            for j in i + 1..omega.len() {
                let (a, b) = (self.index[&omega[i]], self.index[&omega[j]]);
                let phis: Vec<f64> = omega
                    .iter()
                    .filter(|&&c| c != omega[i] && c != omega[j])
                    .filter_map(|c| phi(a, b, self.index[c], &self.d).ok())
                    .collect();
                if phis.is_empty() {
                    continue;
                }
                let spread = phis.iter().copied().fold(f64::NEG_INFINITY, f64::max)
                    - phis.iter().copied().fold(f64::INFINITY, f64::min);
                if best.is_none_or(|(s, _, _)| spread < s) {
                    best = Some((spread, omega[i], omega[j]));
                }
            }
        }
        best.map(|(_, a, b)| vec![a, b])
    }
}

/// Runs recursive grouping over `group`. `d` holds distances between all
/// observed variables; `p` is their count and the first local hidden id.
pub fn local_recursive_grouping(
    group: &Group,
    d: &DistanceMatrix,
    source: &dyn MomentSource,
    k: usize,
    opts: &LrgOptions,
) -> Result<LocalSubtree> {
    let p = source.num_observed();
    let members = group.members.clone();
    if members.len() < 2 || !members.contains(&group.leader) {
        return Err(Error::InvalidArgument(format!("malformed group led by {}", group.leader)));
    }
    let local_d = d.restrict(&members);
    let eps = match opts.epsilon {
        Epsilon::Fixed(e) => e,
        Epsilon::Auto => {
            let mut min = f64::INFINITY;
            for a in 0..members.len() {
                for b in a + 1..members.len() {
                    min = min.min(local_d.get(a, b));
                }
            }
            if min.is_finite() {
                AUTO_EPSILON_FACTOR * min
            } else {
                0.0
            }
        }
    };
    let mut tree = LatentTree::new(k);
    let mut views = BTreeMap::new();
    let mut log_norm = BTreeMap::new();
    for &v in &members {
        tree.add_observed(v, source.dim(v));
        views.insert(v, View { proxy: v, proj: None, mean: None, dist: 0.0 });
        log_norm.insert(v, log_normalizer(&source.second(v, v)?, k)?);
    }
    let mut st = State {
        source,
        opts,
        k,
        leader: group.leader,
        eps,
        d: local_d,
        ids: members.clone(),
        index: members.iter().enumerate().map(|(i, &v)| (v, i)).collect(),
        next_hidden: p,
        tree,
        views,
        log_norm,
        base: BTreeMap::new(),
        residuals: BTreeMap::new(),
        hidden: Vec::new(),
        decompositions: 0,
        low_confidence: 0,
        ambiguous: 0,
    };

    let mut omega = members.clone();
    let mut round = 0;
    while omega.len() > 2 {
        round += 1;
        let (mut families, _) = st.families(&omega);
        if families.is_empty() {
            match (opts.fallback, st.most_sibling_like(&omega)) {
                (true, Some(pair)) => {
                    log::debug!("group {}: no relation among {omega:?}; forcing siblings {pair:?}", group.leader);
                    families.push(Family::Siblings { members: pair, forced: true });
                }
                _ => return Err(Error::NonConvergence { leader: group.leader, active: omega }),
            }
        }
        let snapshot = omega.clone();
        let mut live = omega.clone();
        for fam in families {
            match fam {
                Family::Parent { parent, children } => {
                    for &c in &children {
                        st.join(parent, c)?;
                    }
                    live.retain(|v| !children.contains(v));
                }
                Family::Siblings { members: sibs, forced } => {
                    let idx = |vs: &[usize]| vs.iter().map(|v| st.index[v]).collect::<Vec<_>>();
                    let (sib_idx, wit_idx, live_idx) = (idx(&sibs), idx(&snapshot), idx(&live));
                    let row = introduce_hidden(&sib_idx, &wit_idx, &live_idx, &mut st.d, eps, opts.fallback)?;
                    let h = st.add_hidden_node(row);
                    let (triplet, residual) = st.estimate_new_hidden(h, &sibs, &snapshot, &live)?;
                    st.hidden.push(HiddenInfo {
                        id: h,
                        children: sibs.clone(),
                        round,
                        test: if forced { "fallback" } else { "siblings" }.into(),
                        triplet,
                        residual,
                        proxy: st.view(h).proxy,
                    });
                    live.retain(|v| !sibs.contains(v));
                    live.push(h);
                }
            }
        }
        if live.len() >= omega.len() {
            return Err(Error::NonConvergence { leader: group.leader, active: omega });
        }
        omega = live;
    }
    if omega.len() == 2 {
        st.join(omega[0], omega[1])?;
    }
    if !st.tree.is_tree() {
        return Err(Error::Structure(format!("local subtree of group {} is not a tree", group.leader)));
    }
    Ok(LocalSubtree {
        leader: group.leader,
        members,
        epsilon: eps,
        tree: st.tree,
        hidden: st.hidden,
        residuals: st.residuals,
        low_confidence: st.low_confidence,
        ambiguous_alignments: st.ambiguous,
        rounds: round,
    })
}
