//! Dense linear-algebra helpers shared by the moment, tensor and merge code:
//! sorted thin SVD, truncated pseudo-inverses, a small third-order tensor type,
//! and hidden-label permutations with maximum-weight assignment.

use itertools::Itertools;
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Thin SVD with singular values sorted in non-increasing order.
pub(crate) fn sorted_svd(m: &DMatrix<f64>) -> (DMatrix<f64>, DVector<f64>, DMatrix<f64>) {
    let (r, c) = m.shape();
    let q = r.min(c);
    if q == 0 {
        return (DMatrix::zeros(r, 0), DVector::zeros(0), DMatrix::zeros(c, 0));
    }
    // nalgebra's bidiagonal SVD can return inaccurate factors for exactly
    // rank-deficient inputs, so the factorization goes through faer.
    let Ok(svd) = faer::Mat::from_fn(r, c, |i, j| m[(i, j)]).thin_svd() else {
        // Non-finite input: report rank zero and let callers reject it.
        return (DMatrix::zeros(r, q), DVector::zeros(q), DMatrix::zeros(c, q));
    };
    let u = DMatrix::from_fn(r, q, |i, j| svd.U()[(i, j)]);
    let v = DMatrix::from_fn(c, q, |i, j| svd.V()[(i, j)]);
    let s = DVector::from_fn(q, |j, _| svd.S()[j]);
    let order: Vec<usize> = (0..q)
        .sorted_by(|&a, &b| s[b].partial_cmp(&s[a]).unwrap_or(std::cmp::Ordering::Equal))
        .collect();
    let u_sorted = DMatrix::from_fn(r, q, |i, j| u[(i, order[j])]);
    let v_sorted = DMatrix::from_fn(c, q, |i, j| v[(i, order[j])]);
    let s_sorted = DVector::from_fn(q, |j, _| s[order[j]]);
    (u_sorted, s_sorted, v_sorted)
}

/// Pseudo-inverse restricted to the top `k` singular directions.
pub(crate) fn pinv_rank(m: &DMatrix<f64>, k: usize) -> Result<DMatrix<f64>> {
    let (u, s, v) = sorted_svd(m);
    if k > s.len() {
        return Err(Error::Dimension(format!(
            "rank {k} pseudo-inverse of a {}x{} matrix",
            m.nrows(),
            m.ncols()
        )));
    }
    let floor = s.get(0).copied().unwrap_or(0.0) * 1e-14;
    let mut out = DMatrix::zeros(m.ncols(), m.nrows());
    for j in 0..k {
        if s[j] <= floor || s[j] == 0.0 {
            return Err(Error::IllConditioned(format!(
                "singular value {j} of a {}x{} matrix is {:.3e}",
                m.nrows(),
                m.ncols(),
                s[j]
            )));
        }
        out += v.column(j) * u.column(j).transpose() / s[j];
    }
    Ok(out)
}

/// Moore-Penrose pseudo-inverse of a matrix expected to have full column rank.
pub(crate) fn pinv_full(m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    pinv_rank(m, m.ncols().min(m.nrows()))
}

/// Smallest singular value (0 for empty matrices).
pub(crate) fn min_singular_value(m: &DMatrix<f64>) -> f64 {
    let (_, s, _) = sorted_svd(m);
    s.iter().copied().fold(f64::INFINITY, f64::min).min(if s.is_empty() { 0.0 } else { f64::INFINITY })
}

/// Largest entrywise absolute difference of two equally shaped matrices.
pub fn max_abs_diff(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    assert_eq!(a.shape(), b.shape());
    a.iter().zip(b.iter()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// Dense third-order array indexed `(i, j, l)`, stored row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor3 {
    dims: [usize; 3],
    data: Vec<f64>,
}

impl Tensor3 {
    pub fn zeros(dims: [usize; 3]) -> Self {
        Self { dims, data: vec![0.0; dims[0] * dims[1] * dims[2]] }
    }

    pub fn from_fn(dims: [usize; 3], mut f: impl FnMut(usize, usize, usize) -> f64) -> Self {
        let mut t = Self::zeros(dims);
        for i in 0..dims[0] {
            for j in 0..dims[1] {
                for l in 0..dims[2] {
                    let idx = t.index(i, j, l);
                    t.data[idx] = f(i, j, l);
                }
            }
        }
        t
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    #[inline]
    fn index(&self, i: usize, j: usize, l: usize) -> usize {
        (i * self.dims[1] + j) * self.dims[2] + l
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize, l: usize) -> f64 {
        self.data[self.index(i, j, l)]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, l: usize, v: f64) {
        let idx = self.index(i, j, l);
        self.data[idx] = v;
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub(crate) fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    /// Accumulates `w * a ⊗ b ⊗ c`.
    pub fn add_outer(&mut self, w: f64, a: &[f64], b: &[f64], c: &[f64]) {
        debug_assert_eq!([a.len(), b.len(), c.len()], self.dims);
        for (i, &ai) in a.iter().enumerate() {
            if ai == 0.0 {
                continue;
            }
            for (j, &bj) in b.iter().enumerate() {
                let wij = w * ai * bj;
                if wij == 0.0 {
                    continue;
                }
                let base = (i * self.dims[1] + j) * self.dims[2];
                for (l, &cl) in c.iter().enumerate() {
                    self.data[base + l] += wij * cl;
                }
            }
        }
    }

    pub fn scale(&mut self, s: f64) {
        self.data.iter_mut().for_each(|x| *x *= s);
    }

    pub fn sub_assign(&mut self, other: &Tensor3) {
        assert_eq!(self.dims, other.dims);
        for (x, y) in self.data.iter_mut().zip(&other.data) {
            *x -= y;
        }
    }

    /// Applies a linear map to every mode: result = E[p x ⊗ q y ⊗ r z]
    /// when `self` = E[x ⊗ y ⊗ z].
    pub fn multilinear(&self, p: &DMatrix<f64>, q: &DMatrix<f64>, r: &DMatrix<f64>) -> Tensor3 {
        assert_eq!(p.ncols(), self.dims[0]);
        assert_eq!(q.ncols(), self.dims[1]);
        assert_eq!(r.ncols(), self.dims[2]);
        let [d0, d1, d2] = self.dims;
        let (n0, n1, n2) = (p.nrows(), q.nrows(), r.nrows());
        // mode 2
        let mut t2 = vec![0.0; d0 * d1 * n2];
        for i in 0..d0 {
            for j in 0..d1 {
                let src = &self.data[(i * d1 + j) * d2..(i * d1 + j + 1) * d2];
                for c in 0..n2 {
                    let mut acc = 0.0;
                    for (l, &v) in src.iter().enumerate() {
                        acc += r[(c, l)] * v;
                    }
                    t2[(i * d1 + j) * n2 + c] = acc;
                }
            }
        }
        // mode 1
        let mut t1 = vec![0.0; d0 * n1 * n2];
        for i in 0..d0 {
            for b in 0..n1 {
                for j in 0..d1 {
                    let w = q[(b, j)];
                    if w == 0.0 {
                        continue;
                    }
                    for c in 0..n2 {
                        t1[(i * n1 + b) * n2 + c] += w * t2[(i * d1 + j) * n2 + c];
                    }
                }
            }
        }
        // mode 0
        let mut out = Tensor3::zeros([n0, n1, n2]);
        for a in 0..n0 {
            for i in 0..d0 {
                let w = p[(a, i)];
                if w == 0.0 {
                    continue;
                }
                for bc in 0..n1 * n2 {
                    out.data[a * n1 * n2 + bc] += w * t1[i * n1 * n2 + bc];
                }
            }
        }
        out
    }

    /// T(u, v, w) = Σ T[i,j,l] u_i v_j w_l.
    pub fn apply(&self, u: &DVector<f64>, v: &DVector<f64>, w: &DVector<f64>) -> f64 {
        let mut acc = 0.0;
        for i in 0..self.dims[0] {
            for j in 0..self.dims[1] {
                let uv = u[i] * v[j];
                for l in 0..self.dims[2] {
                    acc += uv * w[l] * self.get(i, j, l);
                }
            }
        }
        acc
    }

    /// T(I, v, v) as a vector over the first mode.
    pub fn contract_last_two(&self, v: &DVector<f64>) -> DVector<f64> {
        DVector::from_fn(self.dims[0], |i, _| {
            let mut acc = 0.0;
            for j in 0..self.dims[1] {
                for l in 0..self.dims[2] {
                    acc += v[j] * v[l] * self.get(i, j, l);
                }
            }
            acc
        })
    }

    /// Reorders modes: `perm[m]` names the source mode that becomes mode `m`.
    pub fn permute_modes(&self, perm: [usize; 3]) -> Tensor3 {
        let dims = [self.dims[perm[0]], self.dims[perm[1]], self.dims[perm[2]]];
        Tensor3::from_fn(dims, |a, b, c| {
            let mut src = [0usize; 3];
            src[perm[0]] = a;
            src[perm[1]] = b;
            src[perm[2]] = c;
            self.get(src[0], src[1], src[2])
        })
    }

    pub fn frobenius(&self) -> f64 {
        self.data.iter().map(|x| x * x).sum::<f64>().sqrt()
    }

    pub fn max_abs_diff(&self, other: &Tensor3) -> f64 {
        assert_eq!(self.dims, other.dims);
        self.data.iter().zip(&other.data).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max)
    }

    /// Largest deviation from full symmetry (cubic tensors only).
    pub fn asymmetry(&self) -> f64 {
        let n = self.dims[0];
        assert!(self.dims.iter().all(|&d| d == n));
        let mut worst: f64 = 0.0;
        for i in 0..n {
            for j in 0..n {
                for l in 0..n {
                    let v = self.get(i, j, l);
                    for (a, b, c) in [(i, l, j), (j, i, l), (j, l, i), (l, i, j), (l, j, i)] {
                        worst = worst.max((v - self.get(a, b, c)).abs());
                    }
                }
            }
        }
        worst
    }

    /// Averages over all six mode orderings (cubic tensors only).
    pub fn symmetrized(&self) -> Tensor3 {
        let n = self.dims[0];
        Tensor3::from_fn([n, n, n], |i, j, l| {
            (self.get(i, j, l)
                + self.get(i, l, j)
                + self.get(j, i, l)
                + self.get(j, l, i)
                + self.get(l, i, j)
                + self.get(l, j, i))
                / 6.0
        })
    }
}

/// Relabeling of hidden states: new label `r` takes old label `self.0[r]`.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Permutation(pub Vec<usize>);

impl Permutation {
    pub fn identity(k: usize) -> Self {
        Self((0..k).collect())
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn is_identity(&self) -> bool {
        self.0.iter().enumerate().all(|(i, &p)| i == p)
    }

    pub fn is_bijection(&self) -> bool {
        let mut seen = vec![false; self.0.len()];
        for &p in &self.0 {
            if p >= seen.len() || seen[p] {
                return false;
            }
            seen[p] = true;
        }
        true
    }

    pub fn inverse(&self) -> Self {
        let mut inv = vec![0; self.0.len()];
        for (new, &old) in self.0.iter().enumerate() {
            inv[old] = new;
        }
        Self(inv)
    }

    /// `self` applied after `first`.
    pub fn compose(&self, first: &Permutation) -> Self {
        Self(self.0.iter().map(|&i| first.0[i]).collect())
    }

    pub fn permute_columns(&self, m: &DMatrix<f64>) -> DMatrix<f64> {
        DMatrix::from_fn(m.nrows(), self.0.len(), |i, j| m[(i, self.0[j])])
    }

    pub fn permute_rows(&self, m: &DMatrix<f64>) -> DMatrix<f64> {
        DMatrix::from_fn(self.0.len(), m.ncols(), |i, j| m[(self.0[i], j)])
    }

    pub fn permute_vector(&self, v: &DVector<f64>) -> DVector<f64> {
        DVector::from_fn(self.0.len(), |i, _| v[self.0[i]])
    }

    pub fn all(k: usize) -> impl Iterator<Item = Permutation> {
        (0..k).permutations(k).map(Permutation)
    }
}

/// Result of a maximum-weight perfect matching of rows to columns.
#[derive(Debug, Clone)]
pub struct Assignment {
    /// `perm.0[r]` is the row matched to column `r`.
    pub perm: Permutation,
    pub score: f64,
    /// Score of the best different matching when it was enumerated.
    pub runner_up: Option<f64>,
}

impl Assignment {
    pub fn is_ambiguous(&self, tol: f64) -> bool {
        self.runner_up.is_some_and(|r| self.score - r <= tol)
    }
}

const BRUTE_FORCE_MAX_K: usize = 7;

/// Matches each column `r` of a square weight matrix to a distinct row so the
/// total weight Σ_r w[perm[r], r] is maximal. Small problems are solved by
/// enumeration (which also yields the runner-up score); larger ones by the
/// Hungarian method.
pub fn max_weight_assignment(w: &DMatrix<f64>) -> Assignment {
    let k = w.nrows();
    assert_eq!(k, w.ncols(), "assignment needs a square matrix");
    if k <= BRUTE_FORCE_MAX_K {
        let mut best: Option<(Vec<usize>, f64)> = None;
        let mut second = f64::NEG_INFINITY;
        for perm in (0..k).permutations(k) {
            let score: f64 = perm.iter().enumerate().map(|(c, &r)| w[(r, c)]).sum();
            match &best {
                Some((_, b)) if score <= *b => second = second.max(score),
                _ => {
                    if let Some((_, b)) = &best {
                        second = second.max(*b);
                    }
                    best = Some((perm, score));
                }
            }
        }
        let (perm, score) = best.unwrap_or((vec![], 0.0));
        return Assignment {
            perm: Permutation(perm),
            score,
            runner_up: (k > 1).then_some(second),
        };
    }
    let perm = hungarian_max(w);
    let score = perm.iter().enumerate().map(|(c, &r)| w[(r, c)]).sum();
    Assignment { perm: Permutation(perm), score, runner_up: None }
}

/// O(k^3) Hungarian algorithm (potentials form), maximizing Σ w[row(c), c].
fn hungarian_max(w: &DMatrix<f64>) -> Vec<usize> {
    let n = w.nrows();
    let max = w.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    // cost[i][j] with rows = columns of w (jobs), cols = rows of w (workers)
    let cost = |i: usize, j: usize| max - w[(j - 1, i - 1)];
    let inf = f64::INFINITY;
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    let mut p = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0;
        let mut minv = vec![inf; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = inf;
            let mut j1 = 0;
            for j in 1..=n {
                if !used[j] {
                    let cur = cost(i0, j) - u[i0] - v[j];
                    if cur < minv[j] {
                        minv[j] = cur;
                        way[j] = j0;
                    }
                    if minv[j] < delta {
                        delta = minv[j];
                        j1 = j;
                    }
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    // p[j] = job assigned to worker j; we want, per job (column of w), its worker (row of w)
    let mut out = vec![0usize; n];
    for j in 1..=n {
        out[p[j] - 1] = j - 1;
    }
    out
}

/// Largest |column| entry index convention: flips each column of `u` (and the
/// matching column of `v`) so the first entry above `tol` in magnitude is positive.
pub(crate) fn fix_signs(u: &mut DMatrix<f64>, v: &mut DMatrix<f64>) {
    for j in 0..u.ncols() {
        let scale = u.column(j).amax();
        let tol = scale * 1e-9;
        if let Some(first) = u.column(j).iter().copied().find(|x| x.abs() > tol) {
            if first < 0.0 {
                u.column_mut(j).neg_mut();
                if j < v.ncols() {
                    v.column_mut(j).neg_mut();
                }
            }
        }
    }
}
