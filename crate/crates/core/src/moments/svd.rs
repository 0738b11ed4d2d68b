use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::linalg::{fix_signs, sorted_svd};

/// Top-`k` singular triplets `M ≈ U diag(σ) Vᵀ`.
#[derive(Debug, Clone, PartialEq)]
pub struct RankKFactors {
    pub u: DMatrix<f64>,
    pub sigma: DVector<f64>,
    pub v: DMatrix<f64>,
}

impl RankKFactors {
    pub fn reconstruct(&self) -> DMatrix<f64> {
        &self.u * DMatrix::from_diagonal(&self.sigma) * self.v.transpose()
    }
}

/// Exact best rank-`k` factors with the sign convention that the first
/// non-negligible entry of each left singular vector is positive.
pub fn svd_rank_k(m: &DMatrix<f64>, k: usize) -> Result<RankKFactors> {
    let (r, c) = m.shape();
    if k > r.min(c) {
        return Err(Error::Dimension(format!("rank {k} requested from a {r}x{c} matrix")));
    }
    if m.iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFinite("matrix passed to svd".into()));
    }
    let (u, s, v) = sorted_svd(m);
    let mut u = u.columns(0, k).into_owned();
    let mut v = v.columns(0, k).into_owned();
    fix_signs(&mut u, &mut v);
    Ok(RankKFactors { u, sigma: s.rows(0, k).into_owned(), v })
}

/// Minimal matrix interface needed by the sketching SVD.
pub trait LinearOperator {
    fn nrows(&self) -> usize;
    fn ncols(&self) -> usize;
    /// `M · S` where `S` has a single entry `signs[i]` at `(i, bucket[i])`.
    fn apply_sketch(&self, bucket: &[usize], signs: &[f64], width: usize) -> DMatrix<f64>;
    /// `Qᵀ · M`.
    fn project_rows(&self, q: &DMatrix<f64>) -> DMatrix<f64>;
    /// First all-zero row or column, if any, as `(is_row, index)`.
    fn zero_line(&self) -> Option<(bool, usize)>;
}

impl LinearOperator for DMatrix<f64> {
    fn nrows(&self) -> usize {
        self.nrows()
    }

    fn ncols(&self) -> usize {
        self.ncols()
    }

    fn apply_sketch(&self, bucket: &[usize], signs: &[f64], width: usize) -> DMatrix<f64> {
        let mut y = DMatrix::zeros(self.nrows(), width);
        for (j, (&b, &s)) in bucket.iter().zip(signs).enumerate() {
            let mut col = y.column_mut(b);
            col.axpy(s, &self.column(j), 1.0);
        }
        y
    }

    fn project_rows(&self, q: &DMatrix<f64>) -> DMatrix<f64> {
        q.transpose() * self
    }

    fn zero_line(&self) -> Option<(bool, usize)> {
        if let Some(i) = (0..self.nrows()).find(|&i| self.row(i).iter().all(|&x| x == 0.0)) {
            return Some((true, i));
        }
        (0..self.ncols()).find(|&j| self.column(j).iter().all(|&x| x == 0.0)).map(|j| (false, j))
    }
}

/// Compressed sparse rows.
#[derive(Debug, Clone, PartialEq)]
pub struct CsrMatrix {
    nrows: usize,
    ncols: usize,
    row_ptr: Vec<usize>,
    col_idx: Vec<usize>,
    values: Vec<f64>,
}

impl CsrMatrix {
    pub fn from_dense(m: &DMatrix<f64>) -> Self {
        let mut row_ptr = vec![0];
        let mut col_idx = Vec::new();
        let mut values = Vec::new();
        for i in 0..m.nrows() {
            for j in 0..m.ncols() {
                if m[(i, j)] != 0.0 {
                    col_idx.push(j);
                    values.push(m[(i, j)]);
                }
            }
            row_ptr.push(values.len());
        }
        Self { nrows: m.nrows(), ncols: m.ncols(), row_ptr, col_idx, values }
    }

    pub fn nnz(&self) -> usize {
        self.values.len()
    }

    fn row(&self, i: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let r = self.row_ptr[i]..self.row_ptr[i + 1];
        self.col_idx[r.clone()].iter().copied().zip(self.values[r].iter().copied())
    }
}

impl LinearOperator for CsrMatrix {
    fn nrows(&self) -> usize {
        self.nrows
    }

    fn ncols(&self) -> usize {
        self.ncols
    }

    fn apply_sketch(&self, bucket: &[usize], signs: &[f64], width: usize) -> DMatrix<f64> {
        let mut y = DMatrix::zeros(self.nrows, width);
        for i in 0..self.nrows {
            for (j, v) in self.row(i) {
                y[(i, bucket[j])] += signs[j] * v;
            }
        }
        y
    }

    fn project_rows(&self, q: &DMatrix<f64>) -> DMatrix<f64> {
        let mut out = DMatrix::zeros(q.ncols(), self.ncols);
        for i in 0..self.nrows {
            for (j, v) in self.row(i) {
                for r in 0..q.ncols() {
                    out[(r, j)] += q[(i, r)] * v;
                }
            }
        }
        out
    }

    fn zero_line(&self) -> Option<(bool, usize)> {
        if let Some(i) = (0..self.nrows).find(|&i| self.row_ptr[i] == self.row_ptr[i + 1]) {
            return Some((true, i));
        }
        let mut seen = vec![false; self.ncols];
        self.col_idx.iter().for_each(|&j| seen[j] = true);
        seen.iter().position(|&s| !s).map(|j| (false, j))
    }
}

/// Sketch width `⌈α·k⌉`.
pub fn sketch_width(k: usize, alpha: f64) -> usize {
    (alpha * k as f64).ceil() as usize
}

/// Rank-`k` SVD from a sparse embedding: `Y = M·D·Φ` with Rademacher signs
/// `D` and a one-nonzero-per-row hashing matrix `Φ` of width `⌈α·k⌉`; an
/// orthonormal basis `Q` of `Y` captures the range of `M`, and the small
/// matrix `QᵀM` is factored exactly.
pub fn randomized_svd_rank_k<M: LinearOperator + ?Sized>(
    m: &M,
    k: usize,
    alpha: f64,
    seed: u64,
) -> Result<RankKFactors> {
    let (r, c) = (m.nrows(), m.ncols());
    if !(alpha >= 1.0 && alpha.is_finite()) {
        return Err(Error::InvalidArgument(format!("oversampling factor {alpha} must be at least 1")));
    }
    let width = sketch_width(k, alpha);
    if k == 0 || width > r.min(c) {
        return Err(Error::Dimension(format!(
            "sketch width {width} (k={k}, alpha={alpha}) does not fit a {r}x{c} matrix"
        )));
    }
    if let Some((is_row, i)) = m.zero_line() {
        return Err(Error::InvalidArgument(format!(
            "{} {i} is all zeros; drop it before sketching",
            if is_row { "row" } else { "column" }
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let bucket: Vec<usize> = (0..c).map(|_| rng.random_range(0..width)).collect();
    let signs: Vec<f64> = (0..c).map(|_| if rng.random::<bool>() { 1.0 } else { -1.0 }).collect();
    let y = m.apply_sketch(&bucket, &signs, width);
    if y.iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFinite("sketched matrix".into()));
    }
    let q = y.qr().q();
    let b = m.project_rows(&q);
    let (ub, s, vb) = sorted_svd(&b);
    if s.len() < k {
        return Err(Error::Dimension(format!("sketch captured rank {} < {k}", s.len())));
    }
    let mut u = &q * ub.columns(0, k);
    let mut v = vb.columns(0, k).into_owned();
    fix_signs(&mut u, &mut v);
    Ok(RankKFactors { u, sigma: s.rows(0, k).into_owned(), v })
}
