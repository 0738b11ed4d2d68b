//! Latent tree domain types, the synthetic model generator, ancestral
//! sampling and the exact-moment oracle.

mod generator;
mod oracle;
mod sampling;
mod tree;

use serde::{Deserialize, Serialize};

pub use generator::{random_latent_tree, random_latent_tree_with, GeneratorOptions, Topology};
pub use oracle::{exact_distances, exact_moments, exact_pair_moment, exact_triple_moment, MomentQuery, MomentValue};
pub use sampling::{sample_model, Observations, SampleSet, SparseColumns};
pub use tree::{bayes_reverse, LatentTree, Node, NodeId, NodeKind, TreeJson};

use crate::error::{Error, Result};

/// Observation noise around the conditional mean `A·h`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum ObservationFamily {
    /// One-hot vectors; columns of every `A` are probability vectors.
    Categorical,
    /// `A·h + sigma·z` with standard normal `z`.
    Gaussian { sigma: f64 },
}

impl Default for ObservationFamily {
    fn default() -> Self {
        Self::Categorical
    }
}

/// Fully parameterized synthetic model: the source of samples, exact moments
/// and exact distances used as a test oracle.
#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruthModel {
    pub tree: LatentTree,
    pub family: ObservationFamily,
    pub seed: u64,
    /// Root used for ancestral sampling.
    pub root: usize,
}

impl GroundTruthModel {
    pub fn k(&self) -> usize {
        self.tree.k
    }

    pub fn num_observed(&self) -> usize {
        self.tree.observed_ids().len()
    }

    pub fn dims(&self) -> Vec<usize> {
        self.tree.observed_ids().iter().map(|&v| self.tree.dim(v).unwrap()).collect()
    }

    pub fn to_json(&self) -> ModelFile {
        ModelFile {
            tree: self.tree.to_json(),
            family: Some(self.family),
            seed: Some(self.seed),
            root: Some(self.root),
            meta: None,
        }
    }

    pub fn from_json(file: &ModelFile) -> Result<Self> {
        let tree = LatentTree::from_json(&file.tree)?;
        let root = match file.root {
            Some(r) => r,
            None => *tree
                .hidden_ids()
                .first()
                .ok_or_else(|| Error::Structure("model without hidden nodes".into()))?,
        };
        if !tree.is_hidden(root) {
            return Err(Error::Structure(format!("root {root} is not a hidden node")));
        }
        let model = Self { tree, family: file.family.unwrap_or_default(), seed: file.seed.unwrap_or(0), root };
        model.check_complete()?;
        Ok(model)
    }

    /// Every edge readable in both directions needs all priors and a
    /// parameter on every edge with a hidden endpoint.
    pub fn check_complete(&self) -> Result<()> {
        for h in self.tree.hidden_ids() {
            if self.tree.prior(h).is_none() {
                return Err(Error::ModelViolation(format!("hidden node {h} has no prior")));
            }
        }
        for (a, b) in self.tree.edges() {
            if self.tree.param(a, b).is_none() && self.tree.param(b, a).is_none() {
                return Err(Error::ModelViolation(format!("edge {a}-{b} has no parameter")));
            }
        }
        Ok(())
    }
}

/// On-disk model: the tree schema plus optional generator metadata.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelFile {
    #[serde(flatten)]
    pub tree: TreeJson,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub family: Option<ObservationFamily>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub root: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub meta: Option<serde_json::Value>,
}
