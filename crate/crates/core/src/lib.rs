//! Training-free multi-vector image retrieval over frozen transformer patch tokens.
//!
//! The crate is organised by pipeline stage:
//!
//! - [`store`] / [`manifest`]: CBTK token stores and JSON-Lines relevance manifests.
//! - [`pooling`]: single-vector descriptors (CLS, mean, max, GeM).
//! - [`aggregation`]: instance tokens (seed selection, assignment, seed-plus-mean
//!   aggregation) and the per-image K-means / medoid baselines.
//! - [`codebook`] / [`pca`]: global K-means dictionaries, VLAD and PCA whitening.
//! - [`engine`]: late-interaction scoring, exact flat search, the two-stage
//!   shortlist-then-rerank pipeline and descriptor quantization.
//! - [`eval`]: Recall@K, mAP and shortlist recall under cluster-tolerant relevance.
//! - [`synth`]: seeded synthetic benchmark generator.
//!
//! Data-parallel loops go through [`par`], which uses rayon when the `parallel`
//! feature is enabled and plain iterators otherwise. Every parallel loop is a
//! per-item map with no cross-item reduction, so outputs do not depend on the
//! thread count.

pub mod aggregation;
pub mod blob;
pub mod codebook;
pub mod engine;
pub mod error;
pub mod eval;
pub mod kmeans;
pub mod linalg;
pub mod manifest;
pub mod par;
pub mod pca;
pub mod pooling;
pub mod rng;
pub mod store;
pub mod synth;

pub use error::{Error, Result};
pub use manifest::{RelevanceManifest, Role};
pub use store::TokenSet;
