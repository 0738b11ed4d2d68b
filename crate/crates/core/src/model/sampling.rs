use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::{GroundTruthModel, ObservationFamily};
use crate::error::{Error, Result};

/// Compressed sparse columns: one column per sample.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseColumns {
    dim: usize,
    col_ptr: Vec<usize>,
    row_idx: Vec<u32>,
    values: Vec<f64>,
}

impl SparseColumns {
    /// Builds from `(sample, coord, value)` entries; duplicates are summed and
    /// explicit zeros dropped.
    pub fn from_entries(dim: usize, n: usize, mut entries: Vec<(usize, usize, f64)>) -> Result<Self> {
        entries.sort_by_key(|&(s, c, _)| (s, c));
        let mut col_ptr = vec![0usize; n + 1];
        let mut row_idx = Vec::with_capacity(entries.len());
        let mut values: Vec<f64> = Vec::with_capacity(entries.len());
        let mut last: Option<(usize, usize)> = None;
        for (s, c, v) in entries {
            if s >= n || c >= dim {
                return Err(Error::Dimension(format!(
                    "entry (sample {s}, coord {c}) outside {dim}x{n}"
                )));
            }
            if !v.is_finite() {
                return Err(Error::NonFinite(format!("sample {s}, coord {c}")));
            }
            if last == Some((s, c)) {
                *values.last_mut().unwrap() += v;
                continue;
            }
            row_idx.push(c as u32);
            values.push(v);
            col_ptr[s + 1] += 1;
            last = Some((s, c));
        }
        for s in 0..n {
            col_ptr[s + 1] += col_ptr[s];
        }
        let mut out = Self { dim, col_ptr, row_idx, values };
        out.drop_zeros();
        Ok(out)
    }

    fn drop_zeros(&mut self) {
        if self.values.iter().all(|&v| v != 0.0) {
            return;
        }
        let n = self.col_ptr.len() - 1;
        let mut col_ptr = vec![0usize; n + 1];
        let mut row_idx = Vec::new();
        let mut values = Vec::new();
        for s in 0..n {
            for e in self.col_ptr[s]..self.col_ptr[s + 1] {
                if self.values[e] != 0.0 {
                    row_idx.push(self.row_idx[e]);
                    values.push(self.values[e]);
                }
            }
            col_ptr[s + 1] = values.len();
        }
        *self = Self { dim: self.dim, col_ptr, row_idx, values };
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn num_samples(&self) -> usize {
        self.col_ptr.len() - 1
    }

    pub fn nnz(&self) -> usize {
        self.values.len()
    }

    pub fn column(&self, s: usize) -> (&[u32], &[f64]) {
        let r = self.col_ptr[s]..self.col_ptr[s + 1];
        (&self.row_idx[r.clone()], &self.values[r])
    }
}

/// Observations of one variable across all samples.
#[derive(Debug, Clone, PartialEq)]
pub enum Observations {
    /// `d × N`, one column per sample.
    Dense(DMatrix<f64>),
    Sparse(SparseColumns),
}

impl Observations {
    pub fn dim(&self) -> usize {
        match self {
            Self::Dense(m) => m.nrows(),
            Self::Sparse(s) => s.dim(),
        }
    }

    pub fn num_samples(&self) -> usize {
        match self {
            Self::Dense(m) => m.ncols(),
            Self::Sparse(s) => s.num_samples(),
        }
    }

    /// Nonzero `(coord, value)` pairs of sample `s`.
    pub fn entries(&self, s: usize) -> Entries<'_> {
        match self {
            Self::Dense(m) => {
                let d = m.nrows();
                Entries::Dense { col: &m.as_slice()[s * d..(s + 1) * d], pos: 0 }
            }
            Self::Sparse(sp) => {
                let (idx, val) = sp.column(s);
                Entries::Sparse { idx, val, pos: 0 }
            }
        }
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        match self {
            Self::Dense(m) => m.clone(),
            Self::Sparse(sp) => {
                let mut m = DMatrix::zeros(sp.dim(), sp.num_samples());
                for s in 0..sp.num_samples() {
                    let (idx, val) = sp.column(s);
                    for (&i, &v) in idx.iter().zip(val) {
                        m[(i as usize, s)] = v;
                    }
                }
                m
            }
        }
    }
}

pub enum Entries<'a> {
    Dense { col: &'a [f64], pos: usize },
    Sparse { idx: &'a [u32], val: &'a [f64], pos: usize },
}

impl Iterator for Entries<'_> {
    type Item = (usize, f64);

    #[inline]
    fn next(&mut self) -> Option<(usize, f64)> {
        match self {
            Entries::Dense { col, pos } => {
                while *pos < col.len() {
                    let i = *pos;
                    *pos += 1;
                    if col[i] != 0.0 {
                        return Some((i, col[i]));
                    }
                }
                None
            }
            Entries::Sparse { idx, val, pos } => {
                let i = *pos;
                if i < idx.len() {
                    *pos += 1;
                    Some((idx[i] as usize, val[i]))
                } else {
                    None
                }
            }
        }
    }
}

/// i.i.d. samples of the observed variables; immutable once built.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleSet {
    n: usize,
    vars: Vec<Observations>,
}

impl SampleSet {
    pub fn new(vars: Vec<Observations>) -> Result<Self> {
        let n = vars.first().map_or(0, |v| v.num_samples());
        for (i, v) in vars.iter().enumerate() {
            if v.num_samples() != n {
                return Err(Error::Dimension(format!(
                    "variable {i} has {} samples, variable 0 has {n}",
                    v.num_samples()
                )));
            }
            if v.dim() == 0 {
                return Err(Error::Dimension(format!("variable {i} has dimension 0")));
            }
            if let Observations::Dense(m) = v {
                if m.iter().any(|x| !x.is_finite()) {
                    return Err(Error::NonFinite(format!("observations of variable {i}")));
                }
            }
        }
        Ok(Self { n, vars })
    }

    pub fn num_samples(&self) -> usize {
        self.n
    }

    pub fn num_vars(&self) -> usize {
        self.vars.len()
    }

    pub fn dim(&self, v: usize) -> usize {
        self.vars[v].dim()
    }

    pub fn dims(&self) -> Vec<usize> {
        self.vars.iter().map(|v| v.dim()).collect()
    }

    pub fn var(&self, v: usize) -> &Observations {
        &self.vars[v]
    }

    /// Coordinates of variable `v` that are zero in every sample.
    pub fn zero_rows(&self, v: usize) -> Vec<usize> {
        let mut seen = vec![false; self.dim(v)];
        for s in 0..self.n {
            for (i, _) in self.vars[v].entries(s) {
                seen[i] = true;
            }
        }
        seen.iter().enumerate().filter(|(_, &x)| !x).map(|(i, _)| i).collect()
    }
}

/// Ancestral sampling from the model root down to the observed leaves.
pub fn sample_model(model: &GroundTruthModel, n: usize, seed: u64) -> Result<SampleSet> {
    model.check_complete()?;
    let tree = &model.tree;
    let order = tree.bfs_from(model.root);
    let num_ids = tree.node_ids().last().map_or(0, |&m| m + 1);

    // cumulative columns of each downward conditional
    let mut cumulative: Vec<Option<DMatrix<f64>>> = vec![None; num_ids];
    let mut means: Vec<Option<DMatrix<f64>>> = vec![None; num_ids];
    for &(v, parent) in &order[1..] {
        let parent = parent.unwrap();
        if !tree.is_hidden(parent) {
            return Err(Error::ModelViolation(format!(
                "observed node {parent} has a child; sampling needs hidden internal nodes"
            )));
        }
        let m = tree.conditional(parent, v)?;
        if tree.is_hidden(v) || model.family == ObservationFamily::Categorical {
            let mut c = m.clone();
            for r in 0..c.ncols() {
                let mut acc = 0.0;
                for i in 0..c.nrows() {
                    acc += c[(i, r)];
                    c[(i, r)] = acc;
                }
            }
            cumulative[v] = Some(c);
        }
        means[v] = Some(m);
    }

    let pi_root = tree.prior(model.root).unwrap();
    let root_cum: Vec<f64> = pi_root
        .iter()
        .scan(0.0, |acc, &x| {
            *acc += x;
            Some(*acc)
        })
        .collect();

    let observed = tree.observed_ids();
    let p = observed.len();
    if observed != (0..p).collect::<Vec<_>>() {
        return Err(Error::Structure("observed ids must be 0..p".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut state = vec![0usize; num_ids];
    let mut cats: Vec<Vec<(usize, usize, f64)>> = vec![Vec::new(); p];
    let mut dense: Vec<DMatrix<f64>> = match model.family {
        ObservationFamily::Gaussian { .. } => (0..p).map(|v| DMatrix::zeros(tree.dim(v).unwrap(), n)).collect(),
        ObservationFamily::Categorical => Vec::new(),
    };

    for s in 0..n {
        state[model.root] = draw(&root_cum, rng.random::<f64>());
        for &(v, parent) in &order[1..] {
            let h = state[parent.unwrap()];
            if tree.is_hidden(v) {
                let c = cumulative[v].as_ref().unwrap();
                state[v] = draw(c.column(h).as_slice(), rng.random::<f64>());
                continue;
            }
            match model.family {
                ObservationFamily::Categorical => {
                    let c = cumulative[v].as_ref().unwrap();
                    let coord = draw(c.column(h).as_slice(), rng.random::<f64>());
                    cats[v].push((s, coord, 1.0));
                }
                ObservationFamily::Gaussian { sigma } => {
                    let mean = means[v].as_ref().unwrap();
                    let out = &mut dense[v];
                    for i in 0..mean.nrows() {
                        let z: f64 = rng.sample(StandardNormal);
                        out[(i, s)] = mean[(i, h)] + sigma * z;
                    }
                }
            }
        }
    }
    let vars = match model.family {
        ObservationFamily::Categorical => cats
            .into_iter()
            .enumerate()
            .map(|(v, e)| SparseColumns::from_entries(tree.dim(v).unwrap(), n, e).map(Observations::Sparse))
            .collect::<Result<Vec<_>>>()?,
        ObservationFamily::Gaussian { .. } => dense.into_iter().map(Observations::Dense).collect(),
    };
    SampleSet::new(vars)
}

fn draw(cumulative: &[f64], u: f64) -> usize {
    let total = cumulative.last().copied().unwrap_or(1.0);
    let target = u * total;
    cumulative.iter().position(|&c| target < c).unwrap_or(cumulative.len() - 1)
}
