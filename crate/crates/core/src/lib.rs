//! Triple set prediction for knowledge graphs.
//!
//! Given only the known triples of a knowledge graph, predict a scored set of
//! missing triples. The crate contains:
//!
//! - [`kg`]: interned triple store, dataset ingestion and topology helpers.
//! - [`metrics`]: closed-world and relation-similarity partial-open-world
//!   labeling plus JPrecision, STRecall, F_TSP and RS_TSP.
//! - [`partition`]: soft vertex-cut entity grouping and subgraph construction.
//! - [`kge`]: HAKE and PairRE embeddings with self-adversarial training.
//! - [`htem`]: relational GNN encoder and attention pair decoder.
//! - [`pipeline`]: partition → pair prediction → relation scoring.
//! - [`baselines`]: rule mining over sparse matrices and exhaustive KGE scoring.
//! - [`datagen`]: closed family knowledge graphs and dataset splits.
//!
//! Numerical code is generic over [`Scalar`] (`f32` or `f64`); the aliases
//! below fix the common double-precision instantiations.

pub mod baselines;
pub mod datagen;
pub mod htem;
pub mod kg;
pub mod kge;
pub mod metrics;
pub mod optim;
pub mod partition;
pub mod pipeline;
pub mod scalar;
pub mod seed;

pub use kg::{DatasetSplit, EntityId, KnowledgeGraph, RelationId, Triple};
pub use scalar::Scalar;

/// Double-precision KGE model.
pub type KgeModel = kge::KgeModel<f64>;
/// Single-precision KGE model.
pub type KgeModel32 = kge::KgeModel<f32>;
/// Double-precision head-tail entity model.
pub type HtemModel = htem::HtemModel<f64>;
/// Single-precision head-tail entity model.
pub type HtemModel32 = htem::HtemModel<f32>;
