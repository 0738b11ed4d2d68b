//! Sample file formats.
//!
//! Sparse: one JSON header line `{"format":"sparse","p":..,"dims":[..],"N":..}`
//! followed by CSV rows `sample_id,var_id,coord,value`. An optional
//! `sample_id,var_id,coord,value` column line may follow the header. Repeated
//! `(sample, var, coord)` entries are summed.
//!
//! Dense: a CSV header naming every column `var:coord`, then one row per
//! sample.
//!
//! A group map (`raw_feature_id,variable_id,coord`) lets raw features be
//! pooled into multivariate variables. With a map, sparse rows are
//! `sample_id,raw_feature_id,value`, dense headers name raw features, and the
//! header's `p`/`dims` may be omitted.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::Path;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Observations, SampleSet, SparseColumns};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SparseHeader {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub format: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub p: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dims: Option<Vec<usize>>,
    #[serde(rename = "N")]
    pub n: usize,
    /// Free-form provenance block (generator settings, version).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub meta: Option<serde_json::Value>,
}

/// Raw feature id to `(variable, coordinate)`.
#[derive(Debug, Clone, PartialEq)]
pub struct GroupMap {
    map: HashMap<String, (usize, usize)>,
    dims: Vec<usize>,
}

impl GroupMap {
    pub fn get(&self, feature: &str) -> Option<(usize, usize)> {
        self.map.get(feature).copied()
    }

    /// Variable dimensions implied by the largest coordinate of each variable.
    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }
}

fn parse_err<T>(line: usize, msg: impl Into<String>) -> Result<T> {
    Err(Error::Parse { line, msg: msg.into() })
}

fn csv_reader(text: &str) -> csv::Reader<&[u8]> {
    csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes())
}

/// Records with their 1-based line numbers, offset by `first_line - 1`.
fn records(text: &str, first_line: usize) -> impl Iterator<Item = Result<(usize, csv::StringRecord)>> + '_ {
    csv_reader(text).into_records().filter_map(move |r| match r {
        Ok(rec) => {
            let line = rec.position().map_or(0, |p| p.line() as usize) + first_line - 1;
            if rec.iter().all(str::is_empty) {
                None
            } else {
                Some(Ok((line, rec)))
            }
        }
        Err(e) => {
            let line = e.position().map_or(0, |p| p.line() as usize) + first_line - 1;
            Some(parse_err(line, e.to_string()))
        }
    })
}

fn field<T: std::str::FromStr>(rec: &csv::StringRecord, i: usize, what: &str, line: usize) -> Result<T> {
    let raw = rec.get(i).unwrap_or("");
    raw.parse().or_else(|_| parse_err(line, format!("{what} {raw:?} is not valid")))
}

pub fn parse_group_map(text: &str) -> Result<GroupMap> {
    let mut map = HashMap::new();
    let mut dims: Vec<usize> = Vec::new();
    for (i, r) in records(text, 1).enumerate() {
        let (line, rec) = r?;
        if i == 0 && rec.get(1).is_some_and(|f| f.parse::<usize>().is_err()) {
            continue;
        }
        if rec.len() != 3 {
            return parse_err(line, format!("expected 3 fields, found {}", rec.len()));
        }
        let feature = rec[0].to_string();
        let var: usize = field(&rec, 1, "variable id", line)?;
        let coord: usize = field(&rec, 2, "coordinate", line)?;
        if map.insert(feature.clone(), (var, coord)).is_some() {
            return parse_err(line, format!("feature {feature:?} mapped twice"));
        }
        if dims.len() <= var {
            dims.resize(var + 1, 0);
        }
        dims[var] = dims[var].max(coord + 1);
    }
    if let Some(v) = dims.iter().position(|&d| d == 0) {
        return Err(Error::InvalidArgument(format!("group map assigns no feature to variable {v}")));
    }
    Ok(GroupMap { map, dims })
}

pub fn read_group_map(path: &Path) -> Result<GroupMap> {
    parse_group_map(&std::fs::read_to_string(path)?)
}

/// Parses either format, detected from the first non-empty line.
pub fn parse_samples(text: &str, map: Option<&GroupMap>) -> Result<SampleSet> {
    let Some((first_idx, first)) = text.lines().enumerate().find(|(_, l)| !l.trim().is_empty()) else {
        return parse_err(1, "empty sample file");
    };
    let samples = if first.trim_start().starts_with('{') {
        let header: SparseHeader = serde_json::from_str(first)
            .or_else(|e| parse_err(first_idx + 1, format!("bad header: {e}")))?;
        let offset = text.lines().take(first_idx + 1).map(|l| l.len() + 1).sum::<usize>().min(text.len());
        parse_sparse(&header, &text[offset..], first_idx + 2, map)?
    } else {
        parse_dense(text, map)?
    };
    for v in 0..samples.num_vars() {
        let zero = samples.zero_rows(v);
        if !zero.is_empty() && samples.num_samples() > 0 {
            log::warn!("variable {v}: coordinates {zero:?} are zero in every sample");
        }
    }
    Ok(samples)
}

pub fn read_samples(path: &Path, map: Option<&GroupMap>) -> Result<SampleSet> {
    parse_samples(&std::fs::read_to_string(path)?, map)
}

fn parse_sparse(header: &SparseHeader, body: &str, first_line: usize, map: Option<&GroupMap>) -> Result<SampleSet> {
    if let Some(f) = &header.format {
        if f != "sparse" {
            return parse_err(first_line - 1, format!("unknown format {f:?}"));
        }
    }
    let dims = match (&header.dims, map) {
        (Some(d), _) => d.clone(),
        (None, Some(m)) => m.dims().to_vec(),
        (None, None) => return parse_err(first_line - 1, "header needs \"dims\""),
    };
    if header.p.is_some_and(|p| p != dims.len()) {
        return parse_err(first_line - 1, format!("p = {} but {} dims given", header.p.unwrap(), dims.len()));
    }
    if let Some(m) = map {
        if m.dims().len() > dims.len() || m.dims().iter().zip(&dims).any(|(a, b)| a > b) {
            return parse_err(first_line - 1, "group map does not fit the declared dims");
        }
    }
    let n = header.n;
    let mut entries: Vec<Vec<(usize, usize, f64)>> = vec![Vec::new(); dims.len()];
    for (i, r) in records(body, first_line).enumerate() {
        let (line, rec) = r?;
        if i == 0 && rec.get(0) == Some("sample_id") {
            continue;
        }
        let sample: usize = field(&rec, 0, "sample id", line)?;
        let (var, coord, value) = match map {
            None => {
                if rec.len() != 4 {
                    return parse_err(line, format!("expected 4 fields, found {}", rec.len()));
                }
                (field(&rec, 1, "variable id", line)?, field(&rec, 2, "coordinate", line)?, field::<f64>(&rec, 3, "value", line)?)
            }
            Some(m) => {
                if rec.len() != 3 {
                    return parse_err(line, format!("expected 3 fields, found {}", rec.len()));
                }
                let (v, c) = m.get(&rec[1]).ok_or_else(|| Error::Parse {
                    line,
                    msg: format!("feature {:?} is not in the group map", &rec[1]),
                })?;
                (v, c, field::<f64>(&rec, 2, "value", line)?)
            }
        };
        if sample >= n {
            return parse_err(line, format!("sample id {sample} >= N = {n}"));
        }
        if var >= dims.len() || coord >= dims[var] {
            return parse_err(line, format!("entry ({var}, {coord}) outside the declared dims"));
        }
        if !value.is_finite() {
            return parse_err(line, "non-finite value");
        }
        entries[var].push((sample, coord, value));
    }
    let vars = entries
        .into_iter()
        .zip(&dims)
        .map(|(e, &d)| SparseColumns::from_entries(d, n, e).map(Observations::Sparse))
        .collect::<Result<Vec<_>>>()?;
    SampleSet::new(vars)
}

fn parse_dense(text: &str, map: Option<&GroupMap>) -> Result<SampleSet> {
    let mut rows = records(text, 1);
    let (hline, header) = match rows.next() {
        Some(r) => r?,
        None => return parse_err(1, "empty sample file"),
    };
    let mut columns = Vec::with_capacity(header.len());
    for name in header.iter() {
        let slot = match map {
            Some(m) => m.get(name),
            None => name.split_once(':').and_then(|(v, c)| Some((v.parse().ok()?, c.parse().ok()?))),
        };
        match slot {
            Some(s) => columns.push(s),
            None => return parse_err(hline, format!("column {name:?} is not of the form var:coord or a mapped feature")),
        }
    }
    let mut dims: Vec<usize> = map.map(|m| m.dims().to_vec()).unwrap_or_default();
    for &(v, c) in &columns {
        if dims.len() <= v {
            dims.resize(v + 1, 0);
        }
        dims[v] = dims[v].max(c + 1);
    }
    if let Some(v) = dims.iter().position(|&d| d == 0) {
        return parse_err(hline, format!("no column for variable {v}"));
    }

    let mut values: Vec<Vec<f64>> = vec![Vec::new(); dims.len()];
    let mut n = 0;
    for r in rows {
        let (line, rec) = r?;
        if rec.len() != columns.len() {
            return parse_err(line, format!("expected {} fields, found {}", columns.len(), rec.len()));
        }
        for (v, d) in dims.iter().enumerate() {
            values[v].resize((n + 1) * d, 0.0);
        }
        for (j, &(v, c)) in columns.iter().enumerate() {
            let x: f64 = field(&rec, j, "value", line)?;
            if !x.is_finite() {
                return parse_err(line, "non-finite value");
            }
            values[v][n * dims[v] + c] += x;
        }
        n += 1;
    }
    let vars = values
        .into_iter()
        .zip(&dims)
        .map(|(vals, &d)| Observations::Dense(DMatrix::from_vec(d, n, vals)))
        .collect();
    SampleSet::new(vars)
}

/// Sparse format with nonzero entries only; `meta` goes into the header.
pub fn samples_to_sparse(samples: &SampleSet, meta: Option<&serde_json::Value>) -> String {
    let header = SparseHeader {
        format: Some("sparse".into()),
        p: Some(samples.num_vars()),
        dims: Some(samples.dims()),
        n: samples.num_samples(),
        meta: meta.cloned(),
    };
    let mut out = serde_json::to_string(&header).expect("header serializes");
    out.push_str("\nsample_id,var_id,coord,value\n");
    for s in 0..samples.num_samples() {
        for v in 0..samples.num_vars() {
            for (c, x) in samples.var(v).entries(s) {
                let _ = writeln!(out, "{s},{v},{c},{x}");
            }
        }
    }
    out
}

pub fn samples_to_dense(samples: &SampleSet) -> String {
    let mut out = String::new();
    let names: Vec<String> = (0..samples.num_vars())
        .flat_map(|v| (0..samples.dim(v)).map(move |c| format!("{v}:{c}")))
        .collect();
    out.push_str(&names.join(","));
    out.push('\n');
    let dense: Vec<DMatrix<f64>> = (0..samples.num_vars()).map(|v| samples.var(v).to_dense()).collect();
    for s in 0..samples.num_samples() {
        let row: Vec<String> = dense.iter().flat_map(|m| m.column(s).iter().map(|x| x.to_string()).collect::<Vec<_>>()).collect();
        out.push_str(&row.join(","));
        out.push('\n');
    }
    out
}
