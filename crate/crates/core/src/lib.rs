//! Chain-of-thought pipeline with self-verification and citation integration.
//!
//! The library is organised bottom-up:
//!
//! - [`model`]: tasks, gold facts, claims, verification records, run records
//! - [`provider`]: chat-completion providers (HTTP and scripted mock)
//! - [`grammar`] and [`prompting`]: the fenced text formats and stage templates
//! - [`pipeline`]: the four stages, ablations and the two baselines
//! - [`retrieval`]: cosine keyword retriever for the RAG baseline
//! - [`evaluation`]: metrics, aggregation and report tables
//! - [`runtime`]: configuration, run files and the command implementations
//!
//! Metric and retrieval code is generic over [`scalar::Scalar`]; the aliases
//! below fix the scalar for the common cases.

pub mod evaluation;
pub mod grammar;
pub mod model;
pub mod pipeline;
pub mod prompting;
pub mod provider;
pub mod retrieval;
pub mod runtime;
pub mod scalar;

use num_rational::Ratio;

pub type MetricRow = evaluation::MetricRowOf<f64>;
pub type ExactMetricRow = evaluation::MetricRowOf<Ratio<i64>>;
pub type EvalReport = evaluation::EvalReportOf<f64>;
pub type ExactEvalReport = evaluation::EvalReportOf<Ratio<i64>>;
pub type GroupRow = evaluation::GroupRowOf<f64>;
pub type ClaimMatch = evaluation::ClaimMatch<f64>;
pub type CorpusIndex = retrieval::CorpusIndex<f64>;
