use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{GroundTruthModel, LatentTree, ObservationFamily};
use crate::error::{invalid, Error, Result};
use crate::linalg::{max_weight_assignment, min_singular_value};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Topology {
    /// Three-way split at the root, binary splits below.
    Balanced,
    /// A chain of hidden nodes, one leaf per inner chain node, two at each end.
    Caterpillar,
    /// Random shape with hidden degrees in `3..=max_degree`.
    RandomDegree { max_degree: usize },
}

impl FromStr for Topology {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "balanced" => Ok(Self::Balanced),
            "caterpillar" => Ok(Self::Caterpillar),
            _ => {
                let rest = s
                    .strip_prefix("random-degree:")
                    .or_else(|| s.strip_prefix("random:"))
                    .ok_or_else(|| Error::InvalidArgument(format!("unknown topology {s:?}")))?;
                let max_degree = rest
                    .parse()
                    .map_err(|_| Error::InvalidArgument(format!("bad maximum degree in {s:?}")))?;
                Ok(Self::RandomDegree { max_degree })
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GeneratorOptions {
    pub family: ObservationFamily,
    /// Lower bound on the smallest singular value of every transition.
    pub floor: f64,
    /// Range of the identity weight in hidden-to-hidden transitions.
    pub self_weight: (f64, f64),
    /// Required score gap between the identity matching of adjacent hidden
    /// labels and the next best matching.
    pub assignment_margin: f64,
    /// Lower bound on the information distance across a hidden-to-hidden
    /// edge, which equals `−ln |det|` of the normalized joint.
    pub min_hidden_distance: f64,
    /// Dirichlet concentration for categorical emission columns.
    pub concentration: f64,
    pub max_attempts: usize,
}

impl Default for GeneratorOptions {
    fn default() -> Self {
        Self {
            family: ObservationFamily::Categorical,
            floor: 0.1,
            self_weight: (0.6, 0.85),
            assignment_margin: 0.05,
            min_hidden_distance: 0.2,
            concentration: 0.3,
            max_attempts: 100_000,
        }
    }
}

/// Generates an identifiable model with the default options.
pub fn random_latent_tree(
    p: usize,
    k: usize,
    dims: &[usize],
    topology: Topology,
    seed: u64,
) -> Result<GroundTruthModel> {
    random_latent_tree_with(p, k, dims, topology, seed, &GeneratorOptions::default())
}

/// Generates a model whose observed nodes are the leaves `0..p` and whose
/// hidden nodes (ids `p..`) all have degree at least three. `dims` holds one
/// dimension per observed node, or a single value used for all of them.
pub fn random_latent_tree_with(
    p: usize,
    k: usize,
    dims: &[usize],
    topology: Topology,
    seed: u64,
    opts: &GeneratorOptions,
) -> Result<GroundTruthModel> {
    if p < 3 {
        return invalid(format!("need at least 3 observed nodes, got {p}"));
    }
    if k == 0 {
        return invalid("k must be positive");
    }
    let dims: Vec<usize> = match dims.len() {
        1 => vec![dims[0]; p],
        n if n == p => dims.to_vec(),
        n => return invalid(format!("{n} dimensions given for {p} observed nodes")),
    };
    if let Some(&d) = dims.iter().min() {
        if k > d {
            return invalid(format!("k={k} exceeds smallest observed dimension {d}"));
        }
    }
    if let ObservationFamily::Gaussian { sigma } = opts.family {
        if !(sigma >= 0.0 && sigma.is_finite()) {
            return invalid(format!("gaussian sigma must be finite and non-negative, got {sigma}"));
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let skeleton = build_skeleton(p, topology, &mut rng)?;

    let mut leaf_ids: Vec<usize> = (0..p).collect();
    leaf_ids.shuffle(&mut rng);

    let mut tree = LatentTree::new(k);
    for (v, &d) in dims.iter().enumerate() {
        tree.add_observed(v, d);
    }
    let hid = |i: usize| p + i;
    for i in 0..skeleton.hidden_parent.len() {
        tree.add_hidden(hid(i));
    }
    for (i, parent) in skeleton.hidden_parent.iter().enumerate() {
        if let Some(par) = parent {
            tree.add_edge(hid(*par), hid(i))?;
        }
    }
    for (slot, &parent) in skeleton.leaf_parent.iter().enumerate() {
        tree.add_edge(hid(parent), leaf_ids[slot])?;
    }

    let root_prior = {
        let d = dirichlet(&mut rng, 2.0, k);
        DVector::from_fn(k, |r, _| 0.7 * d[r] + 0.3 / k as f64)
    };
    tree.set_prior(hid(0), root_prior)?;

    // hidden nodes were created parent-first, so priors propagate in index order
    for i in 1..skeleton.hidden_parent.len() {
        let par = hid(skeleton.hidden_parent[i].expect("non-root hidden has a parent"));
        let pi_par = tree.prior(par).unwrap().clone();
        let t = hidden_transition(&mut rng, k, &pi_par, opts)?;
        let pi_child = &t * &pi_par;
        tree.set_param(par, hid(i), t)?;
        tree.set_prior(hid(i), pi_child)?;
    }
    for (slot, &parent) in skeleton.leaf_parent.iter().enumerate() {
        let v = leaf_ids[slot];
        let a = emission(&mut rng, dims[v], k, opts)?;
        tree.set_param(hid(parent), v, a)?;
    }

    let model = GroundTruthModel { tree, family: opts.family, seed, root: hid(0) };
    model.tree.check_invariants()?;
    Ok(model)
}

struct Skeleton {
    /// Parent of each hidden node (`None` for the root, index 0).
    hidden_parent: Vec<Option<usize>>,
    /// Hidden parent of each leaf slot.
    leaf_parent: Vec<usize>,
}

fn build_skeleton(p: usize, topology: Topology, rng: &mut ChaCha8Rng) -> Result<Skeleton> {
    let mut sk = Skeleton { hidden_parent: vec![None], leaf_parent: Vec::new() };
    match topology {
        Topology::Balanced => {
            for part in 0..3 {
                let n = p / 3 + usize::from(part < p % 3);
                balanced_subtree(&mut sk, n, 0);
            }
        }
        Topology::Caterpillar => {
            if p == 3 {
                sk.leaf_parent.extend([0, 0, 0]);
            } else {
                let spine = p - 2;
                for i in 1..spine {
                    sk.hidden_parent.push(Some(i - 1));
                }
                sk.leaf_parent.extend([0, 0]);
                for i in 1..spine - 1 {
                    sk.leaf_parent.push(i);
                }
                sk.leaf_parent.extend([spine - 1, spine - 1]);
            }
        }
        Topology::RandomDegree { max_degree } => {
            if max_degree < 3 {
                return invalid(format!("maximum degree must be at least 3, got {max_degree}"));
            }
            let root_deg = rng.random_range(3..=max_degree.min(p));
            sk.leaf_parent.extend(std::iter::repeat_n(0, root_deg));
            while sk.leaf_parent.len() < p {
                let slot = rng.random_range(0..sk.leaf_parent.len());
                let parent = sk.leaf_parent.swap_remove(slot);
                let h = sk.hidden_parent.len();
                sk.hidden_parent.push(Some(parent));
                let max_children = (max_degree - 1).min(p - sk.leaf_parent.len());
                let children = rng.random_range(2..=max_children);
                sk.leaf_parent.extend(std::iter::repeat_n(h, children));
            }
        }
    }
    debug_assert_eq!(sk.leaf_parent.len(), p);
    Ok(sk)
}

fn balanced_subtree(sk: &mut Skeleton, n: usize, parent: usize) {
    if n == 1 {
        sk.leaf_parent.push(parent);
        return;
    }
    let h = sk.hidden_parent.len();
    sk.hidden_parent.push(Some(parent));
    balanced_subtree(sk, n.div_ceil(2), h);
    balanced_subtree(sk, n / 2, h);
}

pub(crate) fn dirichlet(rng: &mut ChaCha8Rng, alpha: f64, n: usize) -> Vec<f64> {
    let gamma = Gamma::new(alpha, 1.0).expect("positive shape");
    loop {
        let draws: Vec<f64> = (0..n).map(|_| gamma.sample(rng)).collect();
        let sum: f64 = draws.iter().sum();
        if sum > 0.0 && sum.is_finite() {
            return draws.into_iter().map(|x| x / sum).collect();
        }
    }
}

/// `λI + (1−λ)R` with random stochastic `R`, redrawn until well conditioned, far
/// enough from the identity, and until the identity is the clear best matching between parent and child
/// labels under the normalized joint distribution.
fn hidden_transition(
    rng: &mut ChaCha8Rng,
    k: usize,
    pi_parent: &DVector<f64>,
    opts: &GeneratorOptions,
) -> Result<DMatrix<f64>> {
    let (lo, hi) = opts.self_weight;
    for _ in 0..opts.max_attempts {
        let lambda = rng.random_range(lo..=hi);
        let cols: Vec<Vec<f64>> = (0..k).map(|_| dirichlet(rng, 1.0, k)).collect();
        let t = DMatrix::from_fn(k, k, |s, r| {
            lambda * f64::from(u8::from(s == r)) + (1.0 - lambda) * cols[r][s]
        });
        if min_singular_value(&t) < opts.floor {
            continue;
        }
        let pi_child = &t * pi_parent;
        let c = normalized_joint(&t, pi_parent, &pi_child);
        if -c.determinant().abs().ln() < opts.min_hidden_distance {
            continue;
        }
        let a = max_weight_assignment(&c);
        let margin = a.runner_up.map_or(f64::INFINITY, |r| a.score - r);
        if a.perm.is_identity() && margin >= opts.assignment_margin {
            return Ok(t);
        }
    }
    Err(Error::ModelViolation("could not draw a well-conditioned hidden transition".into()))
}

/// `diag(π_child)^{-1/2} · J · diag(π_parent)^{-1/2}` where `J` is the joint
/// distribution implied by the transition `t = E[child | parent]`.
pub(crate) fn normalized_joint(t: &DMatrix<f64>, pi_parent: &DVector<f64>, pi_child: &DVector<f64>) -> DMatrix<f64> {
    DMatrix::from_fn(t.nrows(), t.ncols(), |s, r| {
        let denom = (pi_child[s] * pi_parent[r]).sqrt();
        if denom > 0.0 {
            t[(s, r)] * pi_parent[r] / denom
        } else {
            0.0
        }
    })
}

fn emission(rng: &mut ChaCha8Rng, d: usize, k: usize, opts: &GeneratorOptions) -> Result<DMatrix<f64>> {
    for _ in 0..opts.max_attempts {
        let a = match opts.family {
            ObservationFamily::Categorical => {
                let cols: Vec<Vec<f64>> = (0..k).map(|_| dirichlet(rng, opts.concentration, d)).collect();
                DMatrix::from_fn(d, k, |i, r| 0.95 * cols[r][i] + 0.05 / d as f64)
            }
            ObservationFamily::Gaussian { .. } => {
                DMatrix::from_fn(d, k, |_, _| rng.sample::<f64, _>(StandardNormal))
            }
        };
        if min_singular_value(&a) >= opts.floor {
            return Ok(a);
        }
    }
    Err(Error::ModelViolation(format!("could not draw a {d}x{k} emission above the conditioning floor")))
}
