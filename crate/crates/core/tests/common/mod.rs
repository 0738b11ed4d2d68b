//! Independent oracles shared by the integration suites. None of these call
//! into the library's moment, distance, MST or RF code.

#![allow(dead_code)]

use std::collections::{BTreeMap, BTreeSet};

use latree::linalg::Tensor3;
use latree::model::{GroundTruthModel, LatentTree, ObservationFamily};
use nalgebra::{DMatrix, DVector};

/// Parent of every node when the tree hangs from `root`, found by a plain
/// depth-first walk over the edge list.
pub fn parents(t: &LatentTree, root: usize) -> BTreeMap<usize, usize> {
    let mut adj: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (a, b) in t.edges() {
        adj.entry(a).or_default().push(b);
        adj.entry(b).or_default().push(a);
    }
    let mut out = BTreeMap::new();
    let mut stack = vec![(root, usize::MAX)];
    while let Some((v, p)) = stack.pop() {
        if p != usize::MAX {
            out.insert(v, p);
        }
        for &n in &adj[&v] {
            if n != p {
                stack.push((n, v));
            }
        }
    }
    out
}

/// Every joint assignment of the hidden nodes with its probability, by
/// enumeration over `k^H` configurations. Parameters must be stored oriented
/// away from `model.root`, as the generator does.
pub fn hidden_configurations(model: &GroundTruthModel) -> Vec<(BTreeMap<usize, usize>, f64)> {
    let t = &model.tree;
    let k = t.k;
    let hidden = t.hidden_ids();
    let par = parents(t, model.root);
    let total = k.pow(hidden.len() as u32);
    let mut out = Vec::with_capacity(total);
    for code in 0..total {
        let mut state = BTreeMap::new();
        let mut c = code;
        for &h in &hidden {
            state.insert(h, c % k);
            c /= k;
        }
        let mut prob = t.prior(model.root).unwrap()[state[&model.root]];
        for &h in &hidden {
            if h == model.root {
                continue;
            }
            let p = par[&h];
            prob *= t.param(p, h).expect("parameters oriented from the root")[(state[&h], state[&p])];
        }
        out.push((state, prob));
    }
    out
}

/// `E[y_v | hidden configuration]` for an observed leaf.
fn leaf_mean(model: &GroundTruthModel, par: &BTreeMap<usize, usize>, v: usize, state: &BTreeMap<usize, usize>) -> DVector<f64> {
    let p = par[&v];
    model.tree.param(p, v).unwrap().column(state[&p]).into_owned()
}

/// Second moment of observed leaves by brute-force enumeration.
pub fn brute_pair_moment(model: &GroundTruthModel, a: usize, b: usize) -> DMatrix<f64> {
    let t = &model.tree;
    let par = parents(t, model.root);
    let (da, db) = (t.dim(a).unwrap(), t.dim(b).unwrap());
    let mut m = DMatrix::zeros(da, db);
    for (state, prob) in hidden_configurations(model) {
        let ma = leaf_mean(model, &par, a, &state);
        if a == b {
            m += match model.family {
                ObservationFamily::Categorical => DMatrix::from_diagonal(&ma) * prob,
                ObservationFamily::Gaussian { sigma } => {
                    (&ma * ma.transpose() + DMatrix::identity(da, da) * sigma * sigma) * prob
                }
            };
        } else {
            let mb = leaf_mean(model, &par, b, &state);
            m += &ma * mb.transpose() * prob;
        }
    }
    m
}

/// Third moment of three distinct observed leaves by enumeration.
pub fn brute_triple_moment(model: &GroundTruthModel, a: usize, b: usize, c: usize) -> Tensor3 {
    let t = &model.tree;
    let par = parents(t, model.root);
    let dims = [t.dim(a).unwrap(), t.dim(b).unwrap(), t.dim(c).unwrap()];
    let mut out = Tensor3::zeros(dims);
    for (state, prob) in hidden_configurations(model) {
        let (ma, mb, mc) = (leaf_mean(model, &par, a, &state), leaf_mean(model, &par, b, &state), leaf_mean(model, &par, c, &state));
        out.add_outer(prob, ma.as_slice(), mb.as_slice(), mc.as_slice());
    }
    out
}

/// Marginal of a hidden node by enumeration.
pub fn brute_marginal(model: &GroundTruthModel, h: usize) -> DVector<f64> {
    let mut pi = DVector::zeros(model.tree.k);
    for (state, prob) in hidden_configurations(model) {
        pi[state[&h]] += prob;
    }
    pi
}

/// Top-k singular values through the eigenvalues of `MᵀM`.
pub fn top_singular_values(m: &DMatrix<f64>, k: usize) -> Vec<f64> {
    let gram = m.transpose() * m;
    let mut ev: Vec<f64> = gram.symmetric_eigen().eigenvalues.iter().map(|&x| x.max(0.0).sqrt()).collect();
    ev.sort_by(|a, b| b.total_cmp(a));
    ev.truncate(k);
    ev
}

/// Distance formula evaluated from scratch: `−Σ ln σ_i(M_ab) + ½ Σ ln σ_i(M_aa) + ½ Σ ln σ_i(M_bb)`.
pub fn oracle_distance(m_ab: &DMatrix<f64>, m_aa: &DMatrix<f64>, m_bb: &DMatrix<f64>, k: usize) -> f64 {
    let ln = |m: &DMatrix<f64>| top_singular_values(m, k).iter().map(|s| s.ln()).sum::<f64>();
    -ln(m_ab) + 0.5 * ln(m_aa) + 0.5 * ln(m_bb)
}

/// Minimum spanning tree weight by enumerating every labeled tree through its
/// Prüfer sequence.
pub fn brute_mst_weight(w: &[Vec<f64>]) -> f64 {
    let n = w.len();
    if n == 2 {
        return w[0][1];
    }
    let len = n - 2;
    let mut best = f64::INFINITY;
    let mut seq = vec![0usize; len];
    loop {
        let mut degree = vec![1usize; n];
        for &s in &seq {
            degree[s] += 1;
        }
        let mut total = 0.0;
        for &s in &seq {
            let leaf = (0..n).find(|&v| degree[v] == 1).unwrap();
            total += w[leaf][s];
            degree[leaf] -= 1;
            degree[s] -= 1;
        }
        let last: Vec<usize> = (0..n).filter(|&v| degree[v] == 1).collect();
        total += w[last[0]][last[1]];
        best = best.min(total);

        let mut i = 0;
        while i < len {
            seq[i] += 1;
            if seq[i] < n {
                break;
            }
            seq[i] = 0;
            i += 1;
        }
        if i == len {
            return best;
        }
    }
}

/// Splits of the leaf set induced by every edge, as unordered pairs of sides,
/// computed by deleting each edge and flood-filling.
pub fn brute_splits(t: &LatentTree) -> BTreeSet<BTreeSet<BTreeSet<usize>>> {
    let leaves: BTreeSet<usize> = t.observed_ids().into_iter().collect();
    let edges = t.edges();
    let mut out = BTreeSet::new();
    for &(a, b) in &edges {
        let mut side = BTreeSet::from([a]);
        let mut frontier = vec![a];
        while let Some(v) = frontier.pop() {
            for &(x, y) in &edges {
                if (x, y) == (a, b) {
                    continue;
                }
                for (u, w) in [(x, y), (y, x)] {
                    if u == v && side.insert(w) {
                        frontier.push(w);
                    }
                }
            }
        }
        let one: BTreeSet<usize> = side.intersection(&leaves).copied().collect();
        let other: BTreeSet<usize> = leaves.difference(&one).copied().collect();
        if one.len() >= 2 && other.len() >= 2 {
            out.insert(BTreeSet::from([one, other]));
        }
    }
    out
}

pub fn brute_rf(t1: &LatentTree, t2: &LatentTree) -> f64 {
    let (a, b) = (brute_splits(t1), brute_splits(t2));
    if a.is_empty() && b.is_empty() {
        return 0.0;
    }
    a.symmetric_difference(&b).count() as f64 / (a.len() + b.len()) as f64
}

/// Unrooted trees on leaves `0..n` with hidden internal nodes of degree 3,
/// every topology exactly once (built by inserting leaf `i` on each edge of
/// every tree over the first `i` leaves).
pub fn all_binary_trees(n: usize) -> Vec<LatentTree> {
    assert!(n >= 3);
    let mut star = LatentTree::new(2);
    for v in 0..3 {
        star.add_observed(v, 2);
    }
    star.add_hidden(n);
    for v in 0..3 {
        star.add_edge(n, v).unwrap();
    }
    let mut trees = vec![(star, n + 1)];
    for leaf in 3..n {
        let mut next = Vec::new();
        for (t, fresh) in &trees {
            for (a, b) in t.edges() {
                let mut u = t.clone();
                u.remove_edge(a, b);
                u.add_hidden(*fresh);
                u.add_observed(leaf, 2);
                for v in [a, b, leaf] {
                    u.add_edge(*fresh, v).unwrap();
                }
                next.push((u, fresh + 1));
            }
        }
        trees = next;
    }
    trees.into_iter().map(|(t, _)| t).collect()
}

/// Random tree over leaves `0..n` whose internal nodes are hidden with degree
/// at least 3: random binary tree, then random internal edges contracted.
pub fn random_leaf_tree(n: usize, rng: &mut impl rand::Rng) -> LatentTree {
    let mut t = LatentTree::new(2);
    for v in 0..3 {
        t.add_observed(v, 2);
    }
    let mut fresh = n;
    t.add_hidden(fresh);
    for v in 0..3 {
        t.add_edge(fresh, v).unwrap();
    }
    fresh += 1;
    for leaf in 3..n {
        let edges = t.edges();
        let (a, b) = edges[rng.random_range(0..edges.len())];
        t.remove_edge(a, b);
        t.add_hidden(fresh);
        t.add_observed(leaf, 2);
        for v in [a, b, leaf] {
            t.add_edge(fresh, v).unwrap();
        }
        fresh += 1;
    }
    for (a, b) in t.edges() {
        if t.is_hidden(a) && t.is_hidden(b) && t.has_edge(a, b) && rng.random_bool(0.3) {
            let nbrs: Vec<usize> = t.neighbors(b).filter(|&x| x != a).collect();
            t.remove_node(b);
            for x in nbrs {
                t.add_edge(a, x).unwrap();
            }
        }
    }
    t
}
