//! Multivariate information distance and the all-pairs distance matrix.
//!
//! `dist(a, b) = −Σ_{i≤k} ln σ_i(M_ab) + ½ ln N_a + ½ ln N_b`, where `N_v` is
//! the product of the top `k` singular values of the self moment `M_vv`
//! (the determinant when `M_vv` is `k × k`).

use std::fmt::Write as _;

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::moments::{randomized_svd_rank_k, sketch_width, MomentSource};

/// Cross moments whose `k`-th singular value is at or below this are treated
/// as uncorrelated (infinite distance).
pub const SINGULARITY_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct DistanceStats {
    /// Pairs at infinite distance.
    pub infinite: usize,
    /// Negative estimates clamped to zero.
    pub clamped: usize,
}

/// Symmetric matrix of distances; grows when hidden nodes are appended.
/// Unset off-diagonal entries are `+∞`.
#[derive(Debug, Clone, PartialEq)]
pub struct DistanceMatrix {
    n: usize,
    data: Vec<f64>,
    pub stats: DistanceStats,
}

impl DistanceMatrix {
    pub fn new(n: usize) -> Self {
        let mut data = vec![f64::INFINITY; n * n];
        for i in 0..n {
            data[i * n + i] = 0.0;
        }
        Self { n, data, stats: DistanceStats::default() }
    }

    pub fn from_fn(n: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut d = Self::new(n);
        for a in 0..n {
            for b in a + 1..n {
                d.set(a, b, f(a, b));
            }
        }
        d
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    #[inline]
    pub fn get(&self, a: usize, b: usize) -> f64 {
        self.data[a * self.n + b]
    }

    pub fn set(&mut self, a: usize, b: usize, v: f64) {
        if a == b {
            return;
        }
        self.data[a * self.n + b] = v;
        self.data[b * self.n + a] = v;
    }

    /// Appends a node; `row[i]` is its distance to node `i`. Returns its index.
    pub fn extend(&mut self, row: &[f64]) -> usize {
        assert_eq!(row.len(), self.n, "extension row must cover existing nodes");
        let m = self.n + 1;
        let mut data = vec![0.0; m * m];
        for a in 0..self.n {
            data[a * m..a * m + self.n].copy_from_slice(&self.data[a * self.n..(a + 1) * self.n]);
            data[a * m + self.n] = row[a];
            data[self.n * m + a] = row[a];
        }
        self.data = data;
        self.n = m;
        self.n - 1
    }

    /// Sub-matrix over `ids`, re-indexed `0..ids.len()`.
    pub fn restrict(&self, ids: &[usize]) -> DistanceMatrix {
        let mut d = DistanceMatrix::from_fn(ids.len(), |a, b| self.get(ids[a], ids[b]));
        d.stats = self.stats;
        d
    }

    /// Largest absolute difference between finite entries; `∞` if the
    /// infinity patterns differ.
    pub fn max_abs_diff(&self, other: &DistanceMatrix) -> f64 {
        assert_eq!(self.n, other.n);
        self.data
            .iter()
            .zip(&other.data)
            .map(|(&x, &y)| match (x.is_finite(), y.is_finite()) {
                (true, true) => (x - y).abs(),
                (false, false) => 0.0,
                _ => f64::INFINITY,
            })
            .fold(0.0, f64::max)
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    /// CSV with node ids as row and column headers and `inf` for `+∞`.
    pub fn to_csv(&self, labels: Option<&[usize]>) -> String {
        let label = |i: usize| labels.map_or(i, |l| l[i]);
        let mut s = String::from("node");
        for i in 0..self.n {
            let _ = write!(s, ",{}", label(i));
        }
        s.push('\n');
        for a in 0..self.n {
            let _ = write!(s, "{}", label(a));
            for b in 0..self.n {
                let v = self.get(a, b);
                if v.is_infinite() {
                    s.push_str(",inf");
                } else {
                    let _ = write!(s, ",{v}");
                }
            }
            s.push('\n');
        }
        s
    }
}

fn check_finite(m: &DMatrix<f64>, what: &str) -> Result<()> {
    if m.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite(what.into()))
    }
}

fn top_singular_values(m: &DMatrix<f64>, k: usize) -> Result<Vec<f64>> {
    if k > m.nrows().min(m.ncols()) {
        return Err(Error::Dimension(format!(
            "k={k} exceeds the dimensions of a {}x{} moment",
            m.nrows(),
            m.ncols()
        )));
    }
    let mut s: Vec<f64> = m.singular_values().iter().copied().collect();
    s.sort_by(|a, b| b.partial_cmp(a).unwrap_or(std::cmp::Ordering::Equal));
    s.truncate(k);
    Ok(s)
}

/// `Σ_{i≤k} ln σ_i(M_vv)`; `−∞` when the self moment is rank deficient.
pub fn log_normalizer(m_vv: &DMatrix<f64>, k: usize) -> Result<f64> {
    check_finite(m_vv, "self moment")?;
    let s = top_singular_values(m_vv, k)?;
    if s.last().is_some_and(|&x| x <= SINGULARITY_FLOOR) {
        return Ok(f64::NEG_INFINITY);
    }
    Ok(s.iter().map(|x| x.ln()).sum())
}

fn distance_from_sigma(sigma: &[f64], log_na: f64, log_nb: f64) -> f64 {
    if !log_na.is_finite() || !log_nb.is_finite() || sigma.last().is_some_and(|&x| x <= SINGULARITY_FLOOR) {
        return f64::INFINITY;
    }
    -sigma.iter().map(|x| x.ln()).sum::<f64>() + 0.5 * (log_na + log_nb)
}

/// Information distance from a cross moment and both self moments. Not
/// clamped: small negative values can come back from noisy inputs.
pub fn info_distance(m_ab: &DMatrix<f64>, m_aa: &DMatrix<f64>, m_bb: &DMatrix<f64>, k: usize) -> Result<f64> {
    check_finite(m_ab, "cross moment")?;
    let la = log_normalizer(m_aa, k)?;
    let lb = log_normalizer(m_bb, k)?;
    let s = top_singular_values(m_ab, k)?;
    Ok(distance_from_sigma(&s, la, lb))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "lowercase")]
pub enum SvdMode {
    Exact,
    /// Sparse-embedding sketch with width `⌈alpha·k⌉`.
    Randomized { alpha: f64 },
}

/// Top-`k` singular values of a cross moment under the chosen SVD mode.
/// All-zero rows and columns are dropped before sketching; matrices too small
/// for the sketch fall back to the exact SVD.
pub fn cross_singular_values(m: &DMatrix<f64>, k: usize, mode: SvdMode, seed: u64) -> Result<Vec<f64>> {
    match mode {
        SvdMode::Exact => top_singular_values(m, k),
        SvdMode::Randomized { alpha } => {
            let rows: Vec<usize> = (0..m.nrows()).filter(|&i| m.row(i).iter().any(|&x| x != 0.0)).collect();
            let cols: Vec<usize> = (0..m.ncols()).filter(|&j| m.column(j).iter().any(|&x| x != 0.0)).collect();
            if rows.len() < k || cols.len() < k {
                return Ok(vec![0.0; k]);
            }
            if sketch_width(k, alpha) > rows.len().min(cols.len()) {
                return top_singular_values(m, k);
            }
            let reduced = DMatrix::from_fn(rows.len(), cols.len(), |i, j| m[(rows[i], cols[j])]);
            let f = randomized_svd_rank_k(&reduced, k, alpha, seed)?;
            Ok(f.sigma.iter().copied().collect())
        }
    }
}

/// Per-pair seed so results do not depend on scheduling.
pub(crate) fn pair_seed(seed: u64, a: usize, b: usize) -> u64 {
    let mut x = seed ^ ((a as u64) << 32 | b as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    x ^= x >> 30;
    x = x.wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x ^= x >> 27;
    x = x.wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

/// Distances between all observed variables. Pairs are processed in
/// parallel on the current rayon pool; each output cell is owned by one task,
/// so the result is identical for any number of workers.
pub fn all_pairs_distances(source: &dyn MomentSource, k: usize, mode: SvdMode, seed: u64) -> Result<DistanceMatrix> {
    let p = source.num_observed();
    if p < 3 {
        return Err(Error::InvalidArgument(format!("need at least 3 observed variables, got {p}")));
    }
    for v in 0..p {
        if source.dim(v) < k {
            return Err(Error::Dimension(format!("variable {v} has dimension {} < k={k}", source.dim(v))));
        }
    }
    let log_norms: Vec<f64> = (0..p)
        .into_par_iter()
        .map(|v| source.second(v, v).and_then(|m| log_normalizer(&m, k)))
        .collect::<Result<_>>()?;
    let pairs: Vec<(usize, usize)> = (0..p).flat_map(|a| (a + 1..p).map(move |b| (a, b))).collect();
    let values: Vec<f64> = pairs
        .par_iter()
        .map(|&(a, b)| {
            let m = source.second(a, b)?;
            check_finite(&m, "cross moment")?;
            let s = cross_singular_values(&m, k, mode, pair_seed(seed, a, b))?;
            Ok(distance_from_sigma(&s, log_norms[a], log_norms[b]))
        })
        .collect::<Result<_>>()?;
    let mut d = DistanceMatrix::new(p);
    for (&(a, b), &v) in pairs.iter().zip(&values) {
        let v = if v < 0.0 {
            d.stats.clamped += 1;
            0.0
        } else {
            v
        };
        if v.is_infinite() {
            d.stats.infinite += 1;
        }
        d.set(a, b, v);
    }
    if d.stats.infinite > 0 {
        log::warn!("{} variable pairs have infinite distance", d.stats.infinite);
    }
    if d.stats.clamped > 0 {
        log::debug!("{} negative distance estimates clamped to zero", d.stats.clamped);
    }
    Ok(d)
}
