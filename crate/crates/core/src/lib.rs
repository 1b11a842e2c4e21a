//! Routing engine for large libraries of low-rank adapters.
//!
//! Adapters are aligned offline by a rank-r SVD of their product `BA`, which
//! exposes the top right singular vector (the *arrow*) as row 0 of `A*`.
//! At inference every token is routed per layer in two stages: a cheap
//! top-k filter on `|arrow · x|` followed by an exact rerank on `‖A* x‖₂`.
//! The winning adapter is applied as `W x + B* (A* x)`, reusing the
//! projection computed during reranking.
//!
//! Module map:
//! - [`types`]: shared domain types (matrices, adapters, libraries, config)
//! - [`linalg`]: low-rank SVD and spectral alignment
//! - [`arrow_index`]: first-stage arrow scoring and top-k selection
//! - [`spectral`]: second-stage spectral reranking
//! - [`router`]: per-token, per-layer orchestration and adapter application
//! - [`sim`]: synthetic planted-subspace benchmark
//! - [`metrics`]: normalized task score and FLOP / parameter cost model
//! - [`store`]: on-disk library format

// `!(x >= 0.0)` style checks are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod arrow_index;
pub mod error;
pub mod linalg;
pub mod metrics;
pub mod parallel;
pub mod router;
pub mod sim;
pub mod spectral;
pub mod store;
pub mod types;

pub use error::{Error, Result};
pub use parallel::Exec;
pub use types::{
    AdapterLibrary, AlignedAdapter, Dims, LayerId, LayerLibrary, LayerSpec, LibraryTag, Matrix,
    RawAdapter, RoutingConfig, SkippedAdapter, TieBreak, TokenVector,
};
