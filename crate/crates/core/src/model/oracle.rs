use nalgebra::{DMatrix, DVector};

use super::{GroundTruthModel, ObservationFamily};
use crate::distances::{info_distance, DistanceMatrix};
use crate::error::{Error, Result};
use crate::linalg::Tensor3;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MomentQuery {
    Pair(usize, usize),
    Triple(usize, usize, usize),
}

#[derive(Debug, Clone, PartialEq)]
pub enum MomentValue {
    Matrix(DMatrix<f64>),
    Tensor(Tensor3),
}

/// Population moments of the model. Hidden nodes enter as one-hot state
/// vectors, so their self moment is `diag(π)`.
pub fn exact_moments(model: &GroundTruthModel, query: MomentQuery) -> Result<MomentValue> {
    match query {
        MomentQuery::Pair(a, b) => exact_pair_moment(model, a, b).map(MomentValue::Matrix),
        MomentQuery::Triple(a, b, c) => exact_triple_moment(model, a, b, c).map(MomentValue::Tensor),
    }
}

fn prior(model: &GroundTruthModel, h: usize) -> Result<&DVector<f64>> {
    model
        .tree
        .prior(h)
        .ok_or_else(|| Error::ModelViolation(format!("hidden node {h} has no prior")))
}

/// `E[y_v | h]` for a hidden node `h`, one column per hidden state.
fn conditional_mean(model: &GroundTruthModel, h: usize, v: usize) -> Result<DMatrix<f64>> {
    if h == v {
        Ok(DMatrix::identity(model.k(), model.k()))
    } else {
        model.tree.path_conditional(h, v)
    }
}

fn check_node(model: &GroundTruthModel, v: usize) -> Result<()> {
    if model.tree.contains(v) {
        Ok(())
    } else {
        Err(Error::UnknownNode(v))
    }
}

pub fn exact_pair_moment(model: &GroundTruthModel, a: usize, b: usize) -> Result<DMatrix<f64>> {
    check_node(model, a)?;
    check_node(model, b)?;
    let tree = &model.tree;
    if a == b {
        return self_moment(model, a);
    }
    let path = tree.path(a, b)?;
    let u = *path
        .iter()
        .find(|&&v| tree.is_hidden(v))
        .ok_or_else(|| Error::ModelViolation(format!("no hidden node separates {a} and {b}")))?;
    let pi = prior(model, u)?;
    let ea = conditional_mean(model, u, a)?;
    let eb = conditional_mean(model, u, b)?;
    Ok(&ea * DMatrix::from_diagonal(pi) * eb.transpose())
}

fn self_moment(model: &GroundTruthModel, v: usize) -> Result<DMatrix<f64>> {
    let tree = &model.tree;
    if tree.is_hidden(v) {
        return Ok(DMatrix::from_diagonal(prior(model, v)?));
    }
    let u = tree
        .neighbors(v)
        .find(|&n| tree.is_hidden(n))
        .ok_or_else(|| Error::ModelViolation(format!("observed node {v} has no hidden neighbor")))?;
    let pi = prior(model, u)?;
    let e = conditional_mean(model, u, v)?;
    match model.family {
        ObservationFamily::Categorical => Ok(DMatrix::from_diagonal(&(&e * pi))),
        ObservationFamily::Gaussian { sigma } => {
            let d = e.nrows();
            Ok(&e * DMatrix::from_diagonal(pi) * e.transpose() + DMatrix::identity(d, d) * (sigma * sigma))
        }
    }
}

/// Node lying on all three pairwise paths.
pub(crate) fn median_node(model: &GroundTruthModel, a: usize, b: usize, c: usize) -> Result<usize> {
    let tree = &model.tree;
    let ab = tree.path(a, b)?;
    let ac = tree.path(a, c)?;
    let bc = tree.path(b, c)?;
    ab.iter()
        .copied()
        .find(|v| ac.contains(v) && bc.contains(v))
        .ok_or_else(|| Error::Structure(format!("no median node for ({a},{b},{c})")))
}

pub fn exact_triple_moment(model: &GroundTruthModel, a: usize, b: usize, c: usize) -> Result<Tensor3> {
    for v in [a, b, c] {
        check_node(model, v)?;
    }
    if a == b || a == c || b == c {
        return Err(Error::InvalidArgument(format!("triple ({a},{b},{c}) repeats a node")));
    }
    let m = median_node(model, a, b, c)?;
    if !model.tree.is_hidden(m) {
        return Err(Error::ModelViolation(format!("triple ({a},{b},{c}) joins at observed node {m}")));
    }
    let pi = prior(model, m)?;
    let ea = conditional_mean(model, m, a)?;
    let eb = conditional_mean(model, m, b)?;
    let ec = conditional_mean(model, m, c)?;
    let mut t = Tensor3::zeros([ea.nrows(), eb.nrows(), ec.nrows()]);
    for r in 0..model.k() {
        t.add_outer(pi[r], ea.column(r).as_slice(), eb.column(r).as_slice(), ec.column(r).as_slice());
    }
    Ok(t)
}

/// Information distances between every pair of nodes (observed and hidden),
/// indexed by node id.
pub fn exact_distances(model: &GroundTruthModel) -> Result<DistanceMatrix> {
    let ids = model.tree.node_ids();
    let n = ids.last().map_or(0, |&m| m + 1);
    if ids.len() != n {
        return Err(Error::Structure("node ids must be contiguous".into()));
    }
    let selfs: Vec<DMatrix<f64>> = ids.iter().map(|&v| self_moment(model, v)).collect::<Result<_>>()?;
    let mut d = DistanceMatrix::new(n);
    for a in 0..n {
        for b in a + 1..n {
            let m = exact_pair_moment(model, a, b)?;
            let dist = info_distance(&m, &selfs[a], &selfs[b], model.k())?;
            if dist.is_infinite() {
                return Err(Error::IllConditioned(format!("nodes {a} and {b} are uncorrelated")));
            }
            d.set(a, b, dist);
        }
    }
    Ok(d)
}
