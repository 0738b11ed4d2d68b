//! Merging local subtrees into one latent tree and aligning hidden labels.
//!
//! Two neighboring groups led by `x` and `y` share exactly the nodes `x` and
//! `y`. The merge replaces the `x`–`y` paths of both subtrees by a single path
//! running through the intermediate nodes of both. Only the edge joining the
//! two halves needs a new parameter.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{max_weight_assignment, pinv_rank, Permutation};
use crate::lrg::LocalSubtree;
use crate::model::{bayes_reverse, LatentTree};
use crate::moments::MomentSource;
use crate::mst::{MstGraph, UnionFind};

/// Assignment scores closer than this are reported as ties.
pub const AMBIGUITY_TOL: f64 = 1e-9;
/// Max-abs deviation from a permutation beyond which an out-of-group
/// alignment is flagged.
pub const LOW_CONFIDENCE_DEVIATION: f64 = 0.3;

/// Per hidden node, the relabeling applied during global alignment.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct PermutationMap(pub BTreeMap<usize, Permutation>);

#[derive(Debug, Clone, PartialEq)]
pub struct ColumnAlignment {
    /// New state `r` of the aligned decomposition is its old state `perm[r]`.
    pub perm: Permutation,
    pub score: f64,
    pub ambiguous: bool,
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let n = a.iter().map(|x| x * x).sum::<f64>().sqrt() * b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n > 0.0 {
        dot / n
    } else {
        0.0
    }
}

/// Aligns decompositions of one hidden node that share a reference view.
/// Each entry of `others` is that view's conditional mean in its own state
/// order; columns are matched to `reference` by cosine similarity.
pub fn align_in_group(reference: &DMatrix<f64>, others: &[&DMatrix<f64>]) -> Vec<ColumnAlignment> {
    let k = reference.ncols();
    others
        .iter()
        .map(|o| {
            let w = DMatrix::from_fn(k, k, |i, r| cosine(o.column(i).as_slice(), reference.column(r).as_slice()));
            let a = max_weight_assignment(&w);
            let ambiguous = a.is_ambiguous(AMBIGUITY_TOL);
            ColumnAlignment { perm: a.perm, score: a.score, ambiguous }
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct OutGroupAlignment {
    /// New state `s` of the other node is its old state `perm[s]`.
    pub perm: Permutation,
    /// Max-abs distance of the aligned, prior-normalized relation from the
    /// identity.
    pub deviation: f64,
    pub low_confidence: bool,
    pub ambiguous: bool,
}

/// `E[h_ref | h_other] = A_{x|ref}⁺ A_{x|other}` for a view `x` seen from both.
pub fn relation(a_ref: &DMatrix<f64>, a_other: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    Ok(pinv_rank(a_ref, a_ref.ncols())? * a_other)
}

/// Relabels `h_other` so its states line up with `h_ref`, given
/// `rel = E[h_ref | h_other]` and both priors. The joint is normalized to
/// `diag(π_ref)^{-1/2} J diag(π_other)^{-1/2}` before matching.
pub fn align_relation(rel: &DMatrix<f64>, pi_ref: &DVector<f64>, pi_other: &DVector<f64>) -> OutGroupAlignment {
    let k = rel.nrows();
    let c = DMatrix::from_fn(k, k, |s, r| {
        let denom = (pi_ref[s] * pi_other[r]).sqrt();
        if denom > 0.0 {
            rel[(s, r)] * pi_other[r] / denom
        } else {
            0.0
        }
    });
    let a = max_weight_assignment(&c.transpose());
    let aligned = a.perm.permute_columns(&c);
    let deviation = (&aligned - DMatrix::<f64>::identity(k, k)).abs().max();
    OutGroupAlignment {
        ambiguous: a.is_ambiguous(AMBIGUITY_TOL),
        perm: a.perm,
        deviation,
        low_confidence: deviation > LOW_CONFIDENCE_DEVIATION,
    }
}

/// Aligns `h_other` to `h_ref` through a view `x` whose conditional means are
/// known relative to both.
pub fn align_out_group(
    a_ref: &DMatrix<f64>,
    a_other: &DMatrix<f64>,
    pi_ref: &DVector<f64>,
    pi_other: &DVector<f64>,
) -> Result<OutGroupAlignment> {
    Ok(align_relation(&relation(a_ref, a_other)?, pi_ref, pi_other))
}

/// Copies `sub` with hidden ids `p + i` renamed to `offset + i`.
fn globalize(sub: &LatentTree, p: usize, offset: usize) -> Result<LatentTree> {
    let map = |v: usize| if sub.is_hidden(v) { offset + (v - p) } else { v };
    let mut t = LatentTree::new(sub.k);
    for n in sub.nodes() {
        if sub.is_hidden(n.id) {
            t.add_hidden(map(n.id));
        } else {
            t.add_observed(n.id, n.dim);
        }
    }
    for (a, b) in sub.edges() {
        t.add_edge(map(a), map(b))?;
    }
    for (&(a, b), m) in sub.params() {
        t.set_param(map(a), map(b), m.clone())?;
    }
    for (&h, pi) in sub.priors() {
        t.set_prior(map(h), pi.clone())?;
    }
    Ok(t)
}

/// Adds every node, edge, parameter and prior of `other` missing from `into`.
fn absorb(into: &mut LatentTree, other: &LatentTree) -> Result<()> {
    for n in other.nodes() {
        if !into.contains(n.id) {
            if other.is_hidden(n.id) {
                into.add_hidden(n.id);
            } else {
                into.add_observed(n.id, n.dim);
            }
        }
    }
    for (a, b) in other.edges() {
        if !into.has_edge(a, b) {
            into.add_edge(a, b)?;
            copy_param(into, other, a, b)?;
        }
    }
    for (&h, pi) in other.priors() {
        if into.prior(h).is_none() {
            into.set_prior(h, pi.clone())?;
        }
    }
    Ok(())
}

fn copy_param(into: &mut LatentTree, from: &LatentTree, a: usize, b: usize) -> Result<()> {
    if let Some(m) = from.param(a, b) {
        into.set_param(a, b, m.clone())
    } else if let Some(m) = from.param(b, a) {
        into.set_param(b, a, m.clone())
    } else {
        Ok(())
    }
}

/// Node sequence replacing the `x`–`y` paths of both subtrees.
pub fn union_paths(adj_x: &LatentTree, adj_y: &LatentTree, x: usize, y: usize) -> Result<Vec<usize>> {
    let px = adj_x.path(x, y)?;
    let py = adj_y.path(x, y)?;
    let mut out = vec![x];
    out.extend_from_slice(&px[1..px.len() - 1]);
    out.extend_from_slice(&py[1..py.len() - 1]);
    out.push(y);
    Ok(out)
}

/// Estimate of the parameter on the edge `u`–`w` joining the halves of a
/// merged path, `u` from the subtree of `x` and `w` from that of `y`. Returns
/// the oriented edge, its parameter and a residual.
fn junction_param(
    adj_x: &LatentTree,
    adj_y: &LatentTree,
    x: usize,
    y: usize,
    u: usize,
    w: usize,
    source: &dyn MomentSource,
) -> Result<((usize, usize), DMatrix<f64>, f64)> {
    let k = adj_x.k;
    match (adj_x.is_hidden(u), adj_y.is_hidden(w)) {
        (true, true) => {
            let (pi_u, pi_w) = (adj_x.prior(u).unwrap(), adj_y.prior(w).unwrap());
            // Through y: E[w|u] = E[y|w]⁺ E[y|u].
            let y_u = adj_x.path_conditional(u, y)?;
            let y_w = adj_y.path_conditional(w, y)?;
            let est_y = relation(&y_w, &y_u)?;
            let res_y = (&y_w * &est_y - &y_u).norm();
            // Through x: E[u|w] = E[x|u]⁺ E[x|w], then reversed.
            let x_u = adj_x.path_conditional(u, x)?;
            let x_w = adj_y.path_conditional(w, x)?;
            let u_given_w = relation(&x_u, &x_w)?;
            let res_x = (&x_u * &u_given_w - &x_w).norm();
            let est_x = bayes_reverse(&u_given_w, pi_w, pi_u);
            if res_x + AMBIGUITY_TOL < res_y && (&est_x - &est_y).abs().max() > 1e-6 {
                log::warn!("junction {u}-{w}: estimates disagree; keeping the one through {x}");
                Ok(((u, w), est_x, res_x))
            } else {
                Ok(((u, w), est_y, res_y))
            }
        }
        (false, true) => {
            // E[y uᵀ] = E[y|w] Π_w E[u|w]ᵀ.
            let y_w = adj_y.path_conditional(w, y)?;
            let pi_w = adj_y.prior(w).unwrap();
            let m = pinv_rank(&y_w, k)? * source.second(y, u)?;
            Ok(((w, u), scale_columns(&m.transpose(), pi_w), 0.0))
        }
        (true, false) => {
            let x_u = adj_x.path_conditional(u, x)?;
            let pi_u = adj_x.prior(u).unwrap();
            let m = pinv_rank(&x_u, k)? * source.second(x, w)?;
            Ok(((u, w), scale_columns(&m.transpose(), pi_u), 0.0))
        }
        (false, false) => Ok(((u, w), regress(source, u, w)?, 0.0)),
    }
}

/// An observed neighbor `o ≠ avoid` of hidden `h` with `E[y_o | h]` stored
/// directly.
fn observed_anchor(t: &LatentTree, h: usize, avoid: usize) -> Option<(usize, DMatrix<f64>)> {
    t.neighbors(h)
        .filter(|&o| o != avoid && t.is_observed(o))
        .find_map(|o| t.param(h, o).map(|m| (o, m.clone())))
}

/// Junction estimate from observed moments across the new edge, used when
/// the subtrees' path conditionals are unavailable (an observed node sits
/// inside a path). For hidden `u`, `E[y_o yᵀ] = E[o|u] Π_u E[·|u]ᵀ` with `o`
/// an observed neighbor of `u` on the far side from the junction.
fn junction_from_moments(
    adj_x: &LatentTree,
    adj_y: &LatentTree,
    x: usize,
    y: usize,
    u: usize,
    w: usize,
    source: &dyn MomentSource,
) -> Result<((usize, usize), DMatrix<f64>)> {
    let k = adj_x.k;
    let missing = |h: usize| Error::Structure(format!("hidden node {h} has no directly parameterized observed neighbor"));
    match (adj_x.is_hidden(u), adj_y.is_hidden(w)) {
        (true, true) => {
            let (o, a_o) = observed_anchor(adj_x, u, y).ok_or_else(|| missing(u))?;
            let (q, a_q) = observed_anchor(adj_y, w, x).ok_or_else(|| missing(w))?;
            // M_oq = A_o Π_u E[w|u]ᵀ A_qᵀ
            let m = pinv_rank(&a_o, k)? * source.second(o, q)? * pinv_rank(&a_q, k)?.transpose();
            let pi_u = adj_x.prior(u).unwrap();
            Ok(((u, w), scale_columns(&m.transpose(), pi_u)))
        }
        (false, true) => {
            let (q, a_q) = observed_anchor(adj_y, w, x).ok_or_else(|| missing(w))?;
            let m = pinv_rank(&a_q, k)? * source.second(q, u)?;
            Ok(((w, u), scale_columns(&m.transpose(), adj_y.prior(w).unwrap())))
        }
        (true, false) => {
            let (o, a_o) = observed_anchor(adj_x, u, y).ok_or_else(|| missing(u))?;
            let m = pinv_rank(&a_o, k)? * source.second(o, w)?;
            Ok(((u, w), scale_columns(&m.transpose(), adj_x.prior(u).unwrap())))
        }
        (false, false) => Ok(((u, w), regress(source, u, w)?)),
    }
}

/// Divides column `r` by `pi[r]`.
fn scale_columns(m: &DMatrix<f64>, pi: &DVector<f64>) -> DMatrix<f64> {
    DMatrix::from_fn(m.nrows(), m.ncols(), |i, r| if pi[r] > 0.0 { m[(i, r)] / pi[r] } else { 0.0 })
}

/// `E[y_b | y_a] ≈ M_ba M_aa⁺` for observed `a`, `b`.
fn regress(source: &dyn MomentSource, a: usize, b: usize) -> Result<DMatrix<f64>> {
    let m_aa = source.second(a, a)?;
    let rank = m_aa.nrows();
    let inv = pinv_rank(&m_aa, rank).or_else(|_| crate::linalg::pinv_full(&m_aa))?;
    Ok(source.second(b, a)? * inv)
}

/// Output of [`merge_all`].
#[derive(Debug, Clone, PartialEq)]
pub struct MergedTree {
    pub tree: LatentTree,
    /// Hidden node every exported orientation starts from (or the reference
    /// leader when the tree has no hidden node).
    pub root: usize,
    pub alignment: PermutationMap,
    pub low_confidence_alignments: usize,
    pub suppressed: usize,
    /// Per subtree, local hidden id → global hidden id.
    pub hidden_ids: Vec<BTreeMap<usize, usize>>,
}

/// Merges the subtrees of all groups along the MST's leader–leader edges,
/// then aligns hidden labels and orients every parameter away from the root.
/// `subtrees` must be in ascending leader order.
pub fn merge_all(subtrees: &[LocalSubtree], mst: &MstGraph, source: &dyn MomentSource) -> Result<MergedTree> {
    if subtrees.is_empty() {
        return Err(Error::InvalidArgument("nothing to merge".into()));
    }
    let p = source.num_observed();
    let mut adj = Vec::with_capacity(subtrees.len());
    let mut hidden_ids = Vec::with_capacity(subtrees.len());
    let mut offset = p;
    for sub in subtrees {
        adj.push(globalize(&sub.tree, p, offset)?);
        let ids: BTreeMap<usize, usize> = sub.tree.hidden_ids().into_iter().map(|h| (h, offset + (h - p))).collect();
        offset += ids.len();
        hidden_ids.push(ids);
    }
    let group_of: BTreeMap<usize, usize> = subtrees.iter().enumerate().map(|(i, s)| (s.leader, i)).collect();
    let mut leader_edges: Vec<(usize, usize)> = mst
        .edges()
        .iter()
        .filter(|(a, b, _)| group_of.contains_key(a) && group_of.contains_key(b))
        .map(|&(a, b, _)| (a, b))
        .collect();
    leader_edges.sort_unstable();

    let mut comps: Vec<Option<LatentTree>> = adj.iter().cloned().map(Some).collect();
    let mut uf = UnionFind::new(subtrees.len());
    for &(x, y) in &leader_edges {
        let (gx, gy) = (group_of[&x], group_of[&y]);
        let (cx, cy) = (uf.find(gx), uf.find(gy));
        if cx == cy {
            return Err(Error::Structure(format!("leader edge {x}-{y} closes a cycle")));
        }
        let mut merged = comps[cx].take().unwrap();
        absorb(&mut merged, comps[cy].as_ref().unwrap())?;
        comps[cy] = None;

        let (ax, ay) = (&adj[gx], &adj[gy]);
        let px = ax.path(x, y)?;
        let py = ay.path(x, y)?;
        for w in px.windows(2).chain(py.windows(2)) {
            merged.remove_edge(w[0], w[1]);
        }
        let path = union_paths(ax, ay, x, y)?;
        let split = px.len() - 1;
        for (i, w) in path.windows(2).enumerate() {
            merged.add_edge(w[0], w[1])?;
            if i + 1 < split {
                copy_param(&mut merged, ax, w[0], w[1])?;
            } else if i + 1 > split || px.len() == 2 {
                copy_param(&mut merged, ay, w[0], w[1])?;
            } else if py.len() == 2 {
                copy_param(&mut merged, ax, w[0], w[1])?;
            } else {
                let ((a, b), m) = match junction_param(ax, ay, x, y, w[0], w[1], source) {
                    Ok((edge, m, _)) => (edge, m),
                    Err(e) => {
                        log::debug!("junction {}-{}: {e}; estimating from moments", w[0], w[1]);
                        junction_from_moments(ax, ay, x, y, w[0], w[1], source)?
                    }
                };
                merged.set_param(a, b, m)?;
            }
        }
        if !merged.is_tree() {
            return Err(Error::Structure(format!("merging groups {x} and {y} did not produce a tree")));
        }
        uf.union(cx, cy);
        let root = uf.find(cx);
        comps[root] = Some(merged);
    }
    let mut roots: Vec<usize> = (0..subtrees.len()).map(|g| uf.find(g)).collect();
    roots.sort_unstable();
    roots.dedup();
    if roots.len() != 1 {
        return Err(Error::Structure(format!("{} components remain after merging", roots.len())));
    }
    let mut tree = comps[roots[0]].take().unwrap();

    let suppressed = suppress_low_degree(&mut tree, source)?;
    let root = reference_root(&tree, mst, subtrees);
    let (alignment, low_confidence_alignments) = align_globally(&mut tree, root)?;
    finalize_parameters(&mut tree, root)?;
    Ok(MergedTree { tree, root, alignment, low_confidence_alignments, suppressed, hidden_ids })
}

/// Hidden neighbor of the leader with the largest MST degree (ties to the
/// smaller id).
fn reference_root(tree: &LatentTree, mst: &MstGraph, subtrees: &[LocalSubtree]) -> usize {
    let leader = subtrees
        .iter()
        .map(|s| s.leader)
        .max_by(|&a, &b| mst.degree(a).cmp(&mst.degree(b)).then(b.cmp(&a)))
        .unwrap();
    tree.neighbors(leader)
        .filter(|&v| tree.is_hidden(v))
        .min()
        .or_else(|| tree.hidden_ids().first().copied())
        .unwrap_or(leader)
}

/// BFS from `root`; every hidden child of a hidden parent is relabeled to
/// match its parent.
fn align_globally(tree: &mut LatentTree, root: usize) -> Result<(PermutationMap, usize)> {
    let mut map = PermutationMap::default();
    let mut low = 0;
    for (v, parent) in tree.bfs_from(root) {
        let Some(parent) = parent else { continue };
        if !(tree.is_hidden(v) && tree.is_hidden(parent)) {
            continue;
        }
        let rel = tree.conditional(v, parent)?;
        let (pi_p, pi_v) = (tree.prior(parent).unwrap().clone(), tree.prior(v).unwrap().clone());
        let al = align_relation(&rel, &pi_p, &pi_v);
        if al.low_confidence {
            low += 1;
        }
        if !al.perm.is_identity() {
            tree.relabel_hidden(v, &al.perm)?;
        }
        map.0.insert(v, al.perm);
    }
    Ok((map, low))
}

/// Orients hidden–hidden parameters away from `root` and renormalizes
/// priors.
pub fn finalize_parameters(tree: &mut LatentTree, root: usize) -> Result<()> {
    for (v, parent) in tree.bfs_from(root) {
        let Some(parent) = parent else { continue };
        if tree.is_hidden(v) && tree.is_hidden(parent) && tree.param(parent, v).is_none() {
            let m = tree.conditional(parent, v)?;
            tree.set_param(parent, v, m)?;
        }
    }
    let priors: Vec<(usize, DVector<f64>)> = tree.priors().iter().map(|(&h, pi)| (h, pi.clone())).collect();
    for (h, pi) in priors {
        let clamped = pi.map(|x| x.max(1e-12));
        let s = clamped.sum();
        tree.set_prior(h, clamped / s)?;
    }
    Ok(())
}

/// Removes hidden leaves and contracts hidden nodes of degree two. Returns
/// how many nodes were removed.
fn suppress_low_degree(tree: &mut LatentTree, source: &dyn MomentSource) -> Result<usize> {
    let mut removed = 0;
    loop {
        let Some(h) = tree.hidden_ids().into_iter().find(|&h| tree.degree(h) <= 2) else {
            return Ok(removed);
        };
        let nbrs: Vec<usize> = tree.neighbors(h).collect();
        if nbrs.len() == 2 {
            let (a, b) = (nbrs[0], nbrs[1]);
            let (parent, child, m) = if tree.is_hidden(a) {
                (a, b, tree.conditional(h, b)? * tree.conditional(a, h)?)
            } else if tree.is_hidden(b) {
                (b, a, tree.conditional(h, a)? * tree.conditional(b, h)?)
            } else {
                (a, b, regress(source, a, b)?)
            };
            tree.remove_node(h);
            tree.add_edge(parent, child)?;
            tree.set_param(parent, child, m)?;
        } else {
            tree.remove_node(h);
        }
        log::warn!("suppressed hidden node {h} of degree {}", nbrs.len());
        removed += 1;
    }
}
