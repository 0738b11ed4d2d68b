//! End-to-end learning: distances, MST, local grouping per group, merge.

use std::collections::BTreeMap;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::distances::{all_pairs_distances, DistanceMatrix, DistanceStats, SvdMode};
use crate::error::{Error, Result};
use crate::lrg::{local_recursive_grouping, Epsilon, HiddenDistance, LocalSubtree, LrgOptions};
use crate::merge::{merge_all, MergedTree};
use crate::model::{LatentTree, ObservationFamily};
use crate::moments::MomentSource;
use crate::mst::{build_mst_with, extract_groups, group_stats, MstAlgorithm, MstGraph};
use crate::tensor::TensorOptions;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    /// Number of hidden states.
    pub k: usize,
    pub svd: SvdMode,
    pub epsilon: Epsilon,
    pub hidden_distance: HiddenDistance,
    pub tensor: TensorOptions,
    /// Worker threads; 0 uses every available core.
    pub threads: usize,
    pub seed: u64,
    pub family: ObservationFamily,
    pub mst: MstAlgorithm,
    pub lrg_fallback: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            k: 2,
            svd: SvdMode::Exact,
            epsilon: Epsilon::Auto,
            hidden_distance: HiddenDistance::Moment,
            tensor: TensorOptions::default(),
            threads: 0,
            seed: 0,
            family: ObservationFamily::Categorical,
            mst: MstAlgorithm::Prim,
            lrg_fallback: false,
        }
    }
}

impl RunConfig {
    pub fn lrg_options(&self) -> LrgOptions {
        LrgOptions {
            epsilon: self.epsilon,
            hidden_distance: self.hidden_distance,
            tensor: TensorOptions { seed: self.seed, ..self.tensor },
            family: Some(self.family),
            fallback: self.lrg_fallback,
        }
    }
}

/// Wall time per stage in seconds.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct StageTimings {
    pub distances: f64,
    pub mst: f64,
    pub lrg: f64,
    pub merge: f64,
    pub total: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub timings: StageTimings,
    /// Largest group size.
    pub gamma: usize,
    pub degree_histogram: BTreeMap<usize, usize>,
    pub groups: usize,
    pub distance_stats: DistanceStats,
    pub hidden_nodes: usize,
    pub low_confidence_decompositions: usize,
    pub ambiguous_alignments: usize,
    pub low_confidence_alignments: usize,
    pub suppressed_hidden: usize,
    /// Set when the learned tree breaks a model invariant.
    pub invariant_violation: Option<String>,
}

#[derive(Debug, Clone)]
pub struct LearnOutput {
    pub tree: LatentTree,
    pub root: usize,
    pub distances: DistanceMatrix,
    pub mst: MstGraph,
    pub subtrees: Vec<LocalSubtree>,
    pub report: RunReport,
}

fn pool(threads: usize) -> Result<rayon::ThreadPool> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| Error::InvalidArgument(format!("cannot build thread pool: {e}")))
}

/// Observed-node distances on a pool of `threads` workers.
pub fn compute_distances(source: &dyn MomentSource, config: &RunConfig) -> Result<DistanceMatrix> {
    pool(config.threads)?.install(|| all_pairs_distances(source, config.k, config.svd, config.seed))
}

pub fn learn(source: &dyn MomentSource, config: &RunConfig) -> Result<LearnOutput> {
    if config.k == 0 {
        return Err(Error::InvalidArgument("k must be positive".into()));
    }
    let p = source.num_observed();
    for v in 0..p {
        if source.dim(v) < config.k {
            return Err(Error::Dimension(format!("variable {v} has dimension {} < k = {}", source.dim(v), config.k)));
        }
    }
    let pool = pool(config.threads)?;
    pool.install(|| {
        let start = Instant::now();
        let mut timings = StageTimings::default();

        let t = Instant::now();
        let distances = all_pairs_distances(source, config.k, config.svd, config.seed)?;
        timings.distances = t.elapsed().as_secs_f64();
        log::info!("distances: {p} variables in {:.3}s", timings.distances);

        let t = Instant::now();
        let mst = build_mst_with(&distances, config.mst)?;
        let groups = extract_groups(&mst)?;
        let stats = group_stats(&mst);
        timings.mst = t.elapsed().as_secs_f64();
        log::info!("mst: {} groups, largest {}", groups.len(), stats.gamma);

        let t = Instant::now();
        let opts = config.lrg_options();
        let subtrees: Vec<LocalSubtree> = groups
            .par_iter()
            .map(|g| local_recursive_grouping(g, &distances, source, config.k, &opts))
            .collect::<Result<_>>()?;
        timings.lrg = t.elapsed().as_secs_f64();

        let t = Instant::now();
        let MergedTree { tree, root, low_confidence_alignments, suppressed, .. } = merge_all(&subtrees, &mst, source)?;
        timings.merge = t.elapsed().as_secs_f64();
        timings.total = start.elapsed().as_secs_f64();

        let invariant_violation = tree.check_invariants().err().map(|e| e.to_string());
        if let Some(v) = &invariant_violation {
            log::warn!("learned tree: {v}");
        }
        let report = RunReport {
            timings,
            gamma: stats.gamma,
            degree_histogram: stats.degree_histogram,
            groups: groups.len(),
            distance_stats: distances.stats,
            hidden_nodes: tree.hidden_ids().len(),
            low_confidence_decompositions: subtrees.iter().map(|s| s.low_confidence).sum(),
            ambiguous_alignments: subtrees.iter().map(|s| s.ambiguous_alignments).sum(),
            low_confidence_alignments,
            suppressed_hidden: suppressed,
            invariant_violation,
        };
        Ok(LearnOutput { tree, root, distances, mst, subtrees, report })
    })
}
