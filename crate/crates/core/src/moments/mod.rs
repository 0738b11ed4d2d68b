//! Empirical second and third moments, plus exact and sketched rank-k SVD.

mod svd;

use nalgebra::DMatrix;

pub use svd::{randomized_svd_rank_k, sketch_width, svd_rank_k, CsrMatrix, LinearOperator, RankKFactors};

use crate::error::{Error, Result};
use crate::linalg::Tensor3;
use crate::model::{exact_pair_moment, exact_triple_moment, GroundTruthModel, SampleSet};

/// `(1/N) Σ y_a y_bᵀ`.
#[derive(Debug, Clone, PartialEq)]
pub struct SecondMoment {
    pub matrix: DMatrix<f64>,
    pub pair: (usize, usize),
    pub n: usize,
}

/// `(1/N) Σ y_a ⊗ y_b ⊗ y_c`.
#[derive(Debug, Clone, PartialEq)]
pub struct ThirdMoment {
    pub tensor: Tensor3,
    pub triple: (usize, usize, usize),
    pub n: usize,
}

fn check_var(samples: &SampleSet, v: usize) -> Result<()> {
    if v < samples.num_vars() {
        Ok(())
    } else {
        Err(Error::UnknownNode(v))
    }
}

pub fn pairwise_moment(samples: &SampleSet, a: usize, b: usize) -> Result<SecondMoment> {
    check_var(samples, a)?;
    check_var(samples, b)?;
    let n = samples.num_samples();
    if n == 0 {
        return Err(Error::EmptySamples);
    }
    if a > b {
        // one summation order per unordered pair keeps (a,b) and (b,a) exact transposes
        let m = pairwise_moment(samples, b, a)?;
        return Ok(SecondMoment { matrix: m.matrix.transpose(), pair: (a, b), n });
    }
    let (va, vb) = (samples.var(a), samples.var(b));
    let matrix = match (va, vb) {
        (crate::model::Observations::Dense(xa), crate::model::Observations::Dense(xb)) => {
            xa * xb.transpose() / n as f64
        }
        _ => {
            let mut acc = DMatrix::zeros(va.dim(), vb.dim());
            for s in 0..n {
                for (i, x) in va.entries(s) {
                    for (j, y) in vb.entries(s) {
                        acc[(i, j)] += x * y;
                    }
                }
            }
            acc / n as f64
        }
    };
    Ok(SecondMoment { matrix, pair: (a, b), n })
}

/// Streams over samples; never materializes per-sample outer products.
pub fn triplet_moment(samples: &SampleSet, a: usize, b: usize, c: usize) -> Result<ThirdMoment> {
    for v in [a, b, c] {
        check_var(samples, v)?;
    }
    if a == b || a == c || b == c {
        return Err(Error::InvalidArgument(format!("triple ({a},{b},{c}) repeats a variable")));
    }
    let n = samples.num_samples();
    if n == 0 {
        return Err(Error::EmptySamples);
    }
    let (va, vb, vc) = (samples.var(a), samples.var(b), samples.var(c));
    let dims = [va.dim(), vb.dim(), vc.dim()];
    let mut t = Tensor3::zeros(dims);
    let data = t.as_mut_slice();
    let mut cbuf: Vec<(usize, f64)> = Vec::with_capacity(dims[2]);
    for s in 0..n {
        cbuf.clear();
        cbuf.extend(vc.entries(s));
        for (i, x) in va.entries(s) {
            for (j, y) in vb.entries(s) {
                let xy = x * y;
                let base = (i * dims[1] + j) * dims[2];
                for &(l, z) in &cbuf {
                    data[base + l] += xy * z;
                }
            }
        }
    }
    t.scale(1.0 / n as f64);
    Ok(ThirdMoment { tensor: t, triple: (a, b, c), n })
}

/// Anything that can answer moment queries about the observed variables:
/// an empirical sample set or an exact model.
pub trait MomentSource: Sync {
    fn num_observed(&self) -> usize;
    fn dim(&self, v: usize) -> usize;
    fn second(&self, a: usize, b: usize) -> Result<DMatrix<f64>>;
    fn third(&self, a: usize, b: usize, c: usize) -> Result<Tensor3>;
    /// Raw samples, when the source has them.
    fn samples(&self) -> Option<&SampleSet> {
        None
    }
}

impl MomentSource for SampleSet {
    fn num_observed(&self) -> usize {
        self.num_vars()
    }

    fn dim(&self, v: usize) -> usize {
        SampleSet::dim(self, v)
    }

    fn second(&self, a: usize, b: usize) -> Result<DMatrix<f64>> {
        pairwise_moment(self, a, b).map(|m| m.matrix)
    }

    fn third(&self, a: usize, b: usize, c: usize) -> Result<Tensor3> {
        triplet_moment(self, a, b, c).map(|m| m.tensor)
    }

    fn samples(&self) -> Option<&SampleSet> {
        Some(self)
    }
}

/// Exact moments of a model, restricted to its observed nodes.
impl MomentSource for GroundTruthModel {
    fn num_observed(&self) -> usize {
        GroundTruthModel::num_observed(self)
    }

    fn dim(&self, v: usize) -> usize {
        self.tree.dim(v).unwrap_or(0)
    }

    fn second(&self, a: usize, b: usize) -> Result<DMatrix<f64>> {
        for v in [a, b] {
            if !self.tree.is_observed(v) {
                return Err(Error::UnknownNode(v));
            }
        }
        exact_pair_moment(self, a, b)
    }

    fn third(&self, a: usize, b: usize, c: usize) -> Result<Tensor3> {
        for v in [a, b, c] {
            if !self.tree.is_observed(v) {
                return Err(Error::UnknownNode(v));
            }
        }
        exact_triple_moment(self, a, b, c)
    }
}
