//! Structure and parameter learning for linear multivariate latent tree
//! models from i.i.d. samples of the observed variables.

pub mod distances;
pub mod error;
pub mod eval;
pub mod io;
pub mod linalg;
pub mod lrg;
pub mod merge;
pub mod model;
pub mod moments;
pub mod mst;
pub mod pipeline;
pub mod tensor;

pub use error::{Error, Result};
