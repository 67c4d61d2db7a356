//! Data valuation by regression on sampled training subsets.
//!
//! Pipeline: sample subsets ([`sampling`]), score each with a small classifier
//! ([`model`]), then regress utilities on encoded membership to get per-point
//! values ([`valuation`]). A signed k-NN graph ([`graph`]) supplies a local
//! smoothness penalty; [`dynamic`] updates values when points are added or
//! removed, and [`oracle`] computes Shapley baselines to compare against.

pub mod dataset;
pub mod dynamic;
pub mod error;
pub mod evaluation;
pub mod graph;
pub mod model;
pub mod oracle;
pub mod par;
pub mod protocols;
pub mod rng;
pub mod sampling;
pub mod solver;
pub mod valuation;

pub use dataset::{Dataset, Split};
pub use error::{Error, Result};
pub use graph::{GraphConfig, Metric, SimilarityGraph};
pub use model::ModelConfig;
pub use sampling::{DesignMatrix, SamplingConfig};
pub use valuation::ValueVector;
