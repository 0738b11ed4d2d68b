//! Triplet parameter recovery from second and third moments of three views
//! that are conditionally independent given one hidden node.
//!
//! With `M_xy = A_x Π A_yᵀ` and `T = Σ_r π_r a_r ⊗ b_r ⊗ c_r`, the views `a`
//! and `b` are mapped onto view `c` by `T_a = M_cb M_ab⁺` and `T_b = M_ca M_ba⁺`
//! (rank-k pseudo-inverses), so that `T_a A_a = T_b A_b = A_c`. Then
//! `M2 = T_a M_ab T_bᵀ = A_c Π A_cᵀ` and `M3 = T(T_a, T_b, I) = Σ_r π_r c_r^⊗3`.
//! Whitening with `W = U_k S_k^{-1/2}` turns `M3` into an orthogonally
//! decomposable tensor with eigenpairs `(π_r^{-1/2}, W ᵀc_r √π_r)`, found by
//! the tensor power method with restarts and deflation.

use std::cmp::Ordering;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{pinv_full, pinv_rank, sorted_svd, Tensor3};
use crate::model::ObservationFamily;
use crate::moments::MomentSource;

/// Cross moments and the third moment of an ordered triple of views.
#[derive(Debug, Clone, PartialEq)]
pub struct TripletMoments {
    pub m_ab: DMatrix<f64>,
    pub m_ac: DMatrix<f64>,
    pub m_bc: DMatrix<f64>,
    pub t_abc: Tensor3,
}

impl TripletMoments {
    pub fn from_source(source: &dyn MomentSource, a: usize, b: usize, c: usize) -> Result<Self> {
        Ok(Self {
            m_ab: source.second(a, b)?,
            m_ac: source.second(a, c)?,
            m_bc: source.second(b, c)?,
            t_abc: source.third(a, b, c)?,
        })
    }

    /// Applies a linear map to each view: `y_a ↦ P_a y_a` and so on.
    pub fn transformed(&self, pa: Option<&DMatrix<f64>>, pb: Option<&DMatrix<f64>>, pc: Option<&DMatrix<f64>>) -> Self {
        let dims = self.t_abc.dims();
        let id = |d: usize| DMatrix::identity(d, d);
        let pa = pa.cloned().unwrap_or_else(|| id(dims[0]));
        let pb = pb.cloned().unwrap_or_else(|| id(dims[1]));
        let pc = pc.cloned().unwrap_or_else(|| id(dims[2]));
        Self {
            m_ab: &pa * &self.m_ab * pb.transpose(),
            m_ac: &pa * &self.m_ac * pc.transpose(),
            m_bc: &pb * &self.m_bc * pc.transpose(),
            t_abc: self.t_abc.multilinear(&pa, &pb, &pc),
        }
    }

    pub fn dims(&self) -> [usize; 3] {
        self.t_abc.dims()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TensorOptions {
    pub restarts: usize,
    pub iters: usize,
    pub tol: f64,
    pub seed: u64,
}

impl Default for TensorOptions {
    fn default() -> Self {
        Self { restarts: 50, iters: 100, tol: 1e-8, seed: 0 }
    }
}

/// Conditional means of the three views (`d × k`, column `r` is `E[y | h = r]`)
/// and the hidden prior, in one shared state order.
#[derive(Debug, Clone, PartialEq)]
pub struct TripletParams {
    pub a: DMatrix<f64>,
    pub b: DMatrix<f64>,
    pub c: DMatrix<f64>,
    pub pi: DVector<f64>,
    /// Frobenius norm of the third-moment reconstruction error.
    pub residual: f64,
    /// Set when eigenvalues were nearly degenerate or the power method did not
    /// settle.
    pub low_confidence: bool,
}

impl TripletParams {
    pub fn view(&self, i: usize) -> &DMatrix<f64> {
        match i {
            0 => &self.a,
            1 => &self.b,
            _ => &self.c,
        }
    }

    /// `Σ_r π_r a_r ⊗ b_r ⊗ c_r`.
    pub fn reconstruct(&self) -> Tensor3 {
        let mut t = Tensor3::zeros([self.a.nrows(), self.b.nrows(), self.c.nrows()]);
        for r in 0..self.pi.len() {
            t.add_outer(self.pi[r], self.a.column(r).as_slice(), self.b.column(r).as_slice(), self.c.column(r).as_slice());
        }
        t
    }

    /// Reorders states: new state `r` is old state `perm[r]`.
    pub fn permuted(&self, perm: &crate::linalg::Permutation) -> Self {
        Self {
            a: perm.permute_columns(&self.a),
            b: perm.permute_columns(&self.b),
            c: perm.permute_columns(&self.c),
            pi: perm.permute_vector(&self.pi),
            residual: self.residual,
            low_confidence: self.low_confidence,
        }
    }
}

/// Views `a` and `b` mapped onto the anchor view `c`.
#[derive(Debug, Clone, PartialEq)]
pub struct SymmetricViews {
    pub m2: DMatrix<f64>,
    pub m3: Tensor3,
    pub ta: DMatrix<f64>,
    pub tb: DMatrix<f64>,
}

pub fn symmetrize_views(mom: &TripletMoments, k: usize) -> Result<SymmetricViews> {
    let [da, db, dc] = mom.dims();
    if k == 0 || k > da.min(db).min(dc) {
        return Err(Error::Dimension(format!("k={k} does not fit view dimensions {:?}", [da, db, dc])));
    }
    let m_cb = mom.m_bc.transpose();
    let m_ca = mom.m_ac.transpose();
    let m_ba = mom.m_ab.transpose();
    let ta = &m_cb * pinv_rank(&mom.m_ab, k)?;
    let tb = &m_ca * pinv_rank(&m_ba, k)?;
    let m2 = &ta * &mom.m_ab * tb.transpose();
    let m2 = (&m2 + m2.transpose()) * 0.5;
    let m3 = mom.t_abc.multilinear(&ta, &tb, &DMatrix::identity(dc, dc));
    Ok(SymmetricViews { m2, m3, ta, tb })
}

/// `W` with `Wᵀ M2 W = I_k`, and the map back from whitened coordinates.
#[derive(Debug, Clone, PartialEq)]
pub struct Whitener {
    pub w: DMatrix<f64>,
    pub unwhiten: DMatrix<f64>,
}

pub fn whitener(m2: &DMatrix<f64>, k: usize) -> Result<Whitener> {
    let (u, s, _) = sorted_svd(m2);
    if s.len() < k || s[k - 1] <= s[0] * 1e-14 || s[k - 1] <= 0.0 {
        return Err(Error::IllConditioned(format!("second moment has rank below {k}")));
    }
    let u = u.columns(0, k).into_owned();
    let w = DMatrix::from_fn(u.nrows(), k, |i, j| u[(i, j)] / s[j].sqrt());
    let unwhiten = DMatrix::from_fn(u.nrows(), k, |i, j| u[(i, j)] * s[j].sqrt());
    Ok(Whitener { w, unwhiten })
}

struct Eigenpair {
    lambda: f64,
    vector: DVector<f64>,
    converged: bool,
}

fn power_iterate(t: &Tensor3, mut theta: DVector<f64>, iters: usize, tol: f64) -> Eigenpair {
    let mut converged = false;
    for _ in 0..iters {
        let next = t.contract_last_two(&theta);
        let norm = next.norm();
        if norm == 0.0 || !norm.is_finite() {
            break;
        }
        let next = next / norm;
        let change = (&next - &theta).norm();
        theta = next;
        if change < tol {
            converged = true;
            break;
        }
    }
    let lambda = t.apply(&theta, &theta, &theta);
    Eigenpair { lambda, vector: theta, converged }
}

fn robust_eigenpairs(t: &Tensor3, k: usize, opts: &TensorOptions, rng: &mut ChaCha8Rng) -> Vec<Eigenpair> {
    let mut t = t.clone();
    let mut out = Vec::with_capacity(k);
    for _ in 0..k {
        let mut best: Option<Eigenpair> = None;
        for _ in 0..opts.restarts.max(1) {
            let init = DVector::from_fn(k, |_, _| rng.sample::<f64, _>(StandardNormal));
            let norm = init.norm();
            let init = if norm > 0.0 { init / norm } else { DVector::from_element(k, 1.0 / (k as f64).sqrt()) };
            let cand = power_iterate(&t, init, opts.iters, opts.tol);
            if best.as_ref().is_none_or(|b| cand.lambda > b.lambda) {
                best = Some(cand);
            }
        }
        let best = best.unwrap();
        let refined = power_iterate(&t, best.vector.clone(), opts.iters, opts.tol);
        let pair = if refined.lambda >= best.lambda {
            Eigenpair { converged: refined.converged || best.converged, ..refined }
        } else {
            best
        };
        let v = pair.vector.as_slice();
        let mut deflation = Tensor3::zeros([k, k, k]);
        deflation.add_outer(pair.lambda, v, v, v);
        t.sub_assign(&deflation);
        out.push(pair);
    }
    out
}

fn lexicographic(a: &DMatrix<f64>, i: usize, j: usize) -> Ordering {
    for row in 0..a.nrows() {
        match a[(row, i)].total_cmp(&a[(row, j)]) {
            Ordering::Equal => continue,
            o => return o,
        }
    }
    Ordering::Equal
}

/// Recovers `A_a, A_b, A_c` and `π` for three views joined at one hidden node.
/// Output states are ordered by descending prior, ties broken by comparing
/// columns of `A_a` lexicographically.
pub fn decompose_triplet(mom: &TripletMoments, k: usize, opts: &TensorOptions) -> Result<TripletParams> {
    let sym = symmetrize_views(mom, k)?;
    let wh = whitener(&sym.m2, k)?;
    let tw = sym.m3.multilinear(&wh.w.transpose(), &wh.w.transpose(), &wh.w.transpose());
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let pairs = robust_eigenpairs(&tw, k, opts, &mut rng);

    let lambdas: Vec<f64> = pairs.iter().map(|p| p.lambda).collect();
    if lambdas.iter().any(|&l| !(l.is_finite() && l > 0.0)) {
        return Err(Error::IllConditioned(format!("non-positive tensor eigenvalue in {lambdas:?}")));
    }
    let mut low_confidence = pairs.iter().any(|p| !p.converged);
    let lmax = lambdas.iter().copied().fold(0.0, f64::max);
    for i in 0..k {
        for j in i + 1..k {
            if (lambdas[i] - lambdas[j]).abs() < opts.tol * lmax {
                low_confidence = true;
            }
        }
    }

    let mut pi = DVector::from_fn(k, |r, _| 1.0 / (lambdas[r] * lambdas[r]));
    let a_c = DMatrix::from_fn(mom.dims()[2], k, |i, r| {
        lambdas[r] * (wh.unwhiten.row(i) * &pairs[r].vector)[(0, 0)]
    });
    let act_pinv = pinv_full(&a_c.transpose())?;
    let scale = |m: DMatrix<f64>, pi: &DVector<f64>| DMatrix::from_fn(m.nrows(), k, |i, r| m[(i, r)] / pi[r]);
    let a_a = scale(&mom.m_ac * &act_pinv, &pi);
    let a_b = scale(&mom.m_bc * &act_pinv, &pi);

    let total: f64 = pi.sum();
    if !(total.is_finite() && total > 0.0) {
        return Err(Error::IllConditioned("prior estimate does not normalize".into()));
    }
    pi /= total;
    if pi.iter().any(|&x| x < -1e-6) {
        return Err(Error::IllConditioned(format!("negative prior estimate {pi:?}")));
    }

    let mut order: Vec<usize> = (0..k).collect();
    order.sort_by(|&i, &j| {
        if (pi[i] - pi[j]).abs() <= 1e-12 {
            lexicographic(&a_a, i, j)
        } else {
            pi[j].total_cmp(&pi[i])
        }
    });
    let perm = crate::linalg::Permutation(order);
    let mut out = TripletParams { a: a_a, b: a_b, c: a_c, pi, residual: 0.0, low_confidence }.permuted(&perm);
    let mut diff = mom.t_abc.clone();
    diff.sub_assign(&out.reconstruct());
    out.residual = diff.frobenius();
    Ok(out)
}

/// Bayes posterior over hidden states given one observation `x` of a view
/// with conditional means `a` (columns) and prior `pi`.
pub fn posterior_hidden(x: &DVector<f64>, a: &DMatrix<f64>, pi: &DVector<f64>, family: ObservationFamily) -> Result<DVector<f64>> {
    let k = pi.len();
    if a.ncols() != k || a.nrows() != x.len() {
        return Err(Error::Dimension(format!(
            "posterior with x of length {}, A {}x{}, prior of length {k}",
            x.len(),
            a.nrows(),
            a.ncols()
        )));
    }
    let log_lik: Vec<f64> = (0..k)
        .map(|r| match family {
            ObservationFamily::Categorical => x
                .iter()
                .enumerate()
                .filter(|(_, &xi)| xi != 0.0)
                .map(|(i, &xi)| xi * a[(i, r)].max(0.0).ln())
                .sum(),
            ObservationFamily::Gaussian { sigma } => {
                -(x - a.column(r)).norm_squared() / (2.0 * sigma * sigma)
            }
        })
        .collect();
    let logs: Vec<f64> = (0..k).map(|r| pi[r].ln() + log_lik[r]).collect();
    let top = logs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !top.is_finite() {
        return Err(Error::IllConditioned("observation has zero likelihood under every state".into()));
    }
    let w: Vec<f64> = logs.iter().map(|&l| (l - top).exp()).collect();
    let s: f64 = w.iter().sum();
    Ok(DVector::from_iterator(k, w.into_iter().map(|x| x / s)))
}
