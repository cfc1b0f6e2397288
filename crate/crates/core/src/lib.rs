//! Ponzi contract detection from Solidity source.
//!
//! The pipeline lowers a compiler AST into a small def/use IR ([`model`]),
//! builds a nested hypernode graph of contracts, functions and variables
//! ([`hypergraph`]), propagates taint from `msg.sender` / `msg.value`
//! ([`taint`]), keeps only the functions touching tainted data ([`slice`]),
//! renders the taint subgraph as DOT ([`render`]) and hands both to a
//! two-stage chat-completion protocol ([`detect`]). [`eval`] runs labelled
//! corpora and computes confusion-matrix rates and overhead.

pub mod detect;
pub mod eval;
pub mod hypergraph;
pub mod ingest;
pub mod model;
pub mod pipeline;
pub mod render;
pub mod scalar;
pub mod slice;
pub mod taint;

pub use detect::{DetectionReport, Mode};
pub use hypergraph::{Endpoint, HypernodeGraph};
pub use ingest::SourceUnit;
pub use model::{ContractModel, FunctionModel, Statement, VarRef};
pub use pipeline::StaticAnalysis;
pub use scalar::Scalar;
pub use slice::SliceBundle;
pub use taint::TaintSubgraph;

/// Confusion-matrix rates in floating point, as written to `metrics.json`.
pub type MetricsSummary = eval::Metrics<f64>;
/// Confusion-matrix rates as exact fractions.
pub type ExactMetrics = eval::Metrics<num_rational::Ratio<i64>>;
/// Wall-time, token and cost aggregates in floating point.
pub type OverheadStats = eval::Overhead<f64>;
/// Per-1k-token pricing in floating point.
pub type Pricing = detect::Pricing<f64>;
/// Per-1k-token pricing as exact fractions.
pub type ExactPricing = detect::Pricing<num_rational::Ratio<i64>>;
