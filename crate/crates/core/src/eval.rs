//! Structure and parameter quality metrics.

use std::collections::{BTreeMap, BTreeSet, VecDeque};

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{max_weight_assignment, Permutation};
use crate::model::{exact_distances, GroundTruthModel, LatentTree};

/// Split of the observed leaves induced by one edge, stored as the side that
/// contains the smallest observed id.
pub type Bipartition = BTreeSet<usize>;

/// Non-trivial splits of `t` (both sides hold at least two observed nodes).
pub fn bipartitions(t: &LatentTree) -> BTreeSet<Bipartition> {
    let observed = t.observed_ids();
    let Some(&first) = observed.first() else {
        return BTreeSet::new();
    };
    let all: BTreeSet<usize> = observed.iter().copied().collect();
    let mut out = BTreeSet::new();
    for (a, b) in t.edges() {
        let side: BTreeSet<usize> = t.observed_in_branch(a, b).into_iter().collect();
        if side.len() < 2 || all.len() - side.len() < 2 {
            continue;
        }
        out.insert(if side.contains(&first) { side } else { all.difference(&side).copied().collect() });
    }
    out
}

/// `|B1 △ B2| / (|B1| + |B2|)`, or 0 when neither tree has a non-trivial
/// split.
pub fn robinson_foulds(t1: &LatentTree, t2: &LatentTree) -> Result<f64> {
    if t1.observed_ids() != t2.observed_ids() {
        return Err(Error::LeafMismatch(format!(
            "{} vs {} observed nodes with different ids",
            t1.observed_ids().len(),
            t2.observed_ids().len()
        )));
    }
    let (b1, b2) = (bipartitions(t1), bipartitions(t2));
    let total = b1.len() + b2.len();
    if total == 0 {
        return Ok(0.0);
    }
    Ok(b1.symmetric_difference(&b2).count() as f64 / total as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParameterError {
    /// Largest ℓ2 distance between matching columns of `E[child | parent]`.
    pub max_column_error: f64,
    /// Largest absolute difference between matching hidden priors.
    pub prior_error: f64,
    /// Estimated state `sigma[r]` plays the role of true state `r`.
    pub sigma: Permutation,
}

/// Branch leaf sets around a node; identifies it up to tree isomorphism.
fn signature(t: &LatentTree, v: usize) -> BTreeSet<BTreeSet<usize>> {
    t.neighbors(v).map(|n| t.observed_in_branch(n, v).into_iter().collect()).collect()
}

/// Maps each hidden node of `truth` to the hidden node of `est` with the same
/// branch leaf sets.
pub fn match_hidden(est: &LatentTree, truth: &LatentTree) -> Result<BTreeMap<usize, usize>> {
    let by_sig: BTreeMap<_, usize> = est.hidden_ids().into_iter().map(|h| (signature(est, h), h)).collect();
    let mut out = BTreeMap::new();
    for h in truth.hidden_ids() {
        let g = by_sig
            .get(&signature(truth, h))
            .ok_or_else(|| Error::Structure(format!("true hidden node {h} has no counterpart")))?;
        out.insert(h, *g);
    }
    if out.len() != est.hidden_ids().len() {
        return Err(Error::Structure("hidden node counts differ".into()));
    }
    Ok(out)
}

/// Error of `est` against `truth` under the single global hidden relabeling
/// that best matches conditional-mean columns and priors.
pub fn parameter_error(est: &LatentTree, truth: &LatentTree) -> Result<ParameterError> {
    if robinson_foulds(est, truth)? != 0.0 {
        return Err(Error::Structure("structures differ".into()));
    }
    let map = |v: usize, m: &BTreeMap<usize, usize>| if truth.is_hidden(v) { m[&v] } else { v };
    let hidden = match_hidden(est, truth)?;
    for (a, b) in truth.edges() {
        if !est.has_edge(map(a, &hidden), map(b, &hidden)) {
            return Err(Error::Structure(format!("edge {a}-{b} is missing from the estimate")));
        }
    }
    let k = truth.k;
    let mut pairs = Vec::new();
    for &(parent, child) in truth.params().keys() {
        let t = truth.conditional(parent, child)?;
        let e = est.conditional(map(parent, &hidden), map(child, &hidden))?;
        pairs.push((parent, child, t, e));
    }

    // Cost of pairing estimated state i with true state r, summed over the
    // columns of hidden-to-observed conditionals and over priors.
    let mut w = DMatrix::zeros(k, k);
    for (parent, child, t, e) in &pairs {
        if truth.is_hidden(*parent) && !truth.is_hidden(*child) {
            for i in 0..k {
                for r in 0..k {
                    w[(i, r)] -= (e.column(i) - t.column(r)).norm_squared();
                }
            }
        }
    }
    for (&h, &g) in &hidden {
        let (t, e) = (truth.prior(h).unwrap(), est.prior(g).unwrap());
        for i in 0..k {
            for r in 0..k {
                w[(i, r)] -= (e[i] - t[r]).powi(2);
            }
        }
    }
    let sigma = max_weight_assignment(&w).perm;

    let mut max_column_error: f64 = 0.0;
    for (parent, child, t, e) in &pairs {
        let mut e = e.clone();
        if truth.is_hidden(*parent) {
            e = sigma.permute_columns(&e);
        }
        if truth.is_hidden(*child) {
            e = sigma.permute_rows(&e);
        }
        for r in 0..t.ncols() {
            max_column_error = max_column_error.max((e.column(r) - t.column(r)).norm());
        }
    }
    let mut prior_error: f64 = 0.0;
    for (&h, &g) in &hidden {
        let e = sigma.permute_vector(est.prior(g).unwrap());
        prior_error = prior_error.max((e - truth.prior(h).unwrap()).abs().max());
    }
    Ok(ParameterError { max_column_error, prior_error, sigma })
}

/// Quantities of the group-size bound `Γ ≤ Δ^{1 + (u_d / l_d) δ}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NeighborhoodBound {
    /// Maximum degree of the latent tree.
    pub max_degree: usize,
    /// Largest hop count from a hidden node to its nearest observed node.
    pub depth: usize,
    /// Largest and smallest information distance across an edge.
    pub upper: f64,
    pub lower: f64,
    pub bound: f64,
}

pub fn neighborhood_bound(model: &GroundTruthModel) -> Result<NeighborhoodBound> {
    let t = &model.tree;
    let d = exact_distances(model)?;
    let (mut upper, mut lower) = (0.0f64, f64::INFINITY);
    for (a, b) in t.edges() {
        upper = upper.max(d.get(a, b));
        lower = lower.min(d.get(a, b));
    }
    let max_degree = t.node_ids().into_iter().map(|v| t.degree(v)).max().unwrap_or(0);
    let mut depth = 0;
    for h in t.hidden_ids() {
        let mut seen = BTreeSet::from([h]);
        let mut queue = VecDeque::from([(h, 0)]);
        while let Some((v, hops)) = queue.pop_front() {
            if t.is_observed(v) {
                depth = depth.max(hops);
                break;
            }
            for n in t.neighbors(v) {
                if seen.insert(n) {
                    queue.push_back((n, hops + 1));
                }
            }
        }
    }
    let bound = (max_degree as f64).powf(1.0 + upper / lower * depth as f64);
    Ok(NeighborhoodBound { max_degree, depth, upper, lower, bound })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn quartet(pairs: [[usize; 2]; 2]) -> LatentTree {
        let mut t = LatentTree::new(2);
        for i in 0..4 {
            t.add_observed(i, 2);
        }
        t.add_hidden(4);
        t.add_hidden(5);
        t.add_edge(4, 5).unwrap();
        for (h, pair) in [4, 5].into_iter().zip(pairs) {
            for v in pair {
                t.add_edge(h, v).unwrap();
            }
        }
        t
    }

    #[test]
    fn distinct_quartets_are_maximally_apart() {
        let a = quartet([[0, 1], [2, 3]]);
        let b = quartet([[0, 2], [1, 3]]);
        assert_eq!(robinson_foulds(&a, &a).unwrap(), 0.0);
        assert_eq!(robinson_foulds(&a, &b).unwrap(), 1.0);
        assert_eq!(robinson_foulds(&b, &a).unwrap(), 1.0);
    }

    #[test]
    fn leaf_mismatch_is_an_error() {
        let a = quartet([[0, 1], [2, 3]]);
        let mut b = a.clone();
        b.add_observed(9, 2);
        b.add_edge(4, 9).unwrap();
        assert!(matches!(robinson_foulds(&a, &b), Err(Error::LeafMismatch(_))));
    }

    #[test]
    fn canonical_side_holds_the_first_leaf() {
        let splits = bipartitions(&quartet([[2, 3], [0, 1]]));
        assert_eq!(splits, BTreeSet::from([BTreeSet::from([0, 1])]));
    }
}
