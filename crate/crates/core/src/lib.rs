//! Knowledge-graph-augmented retrieval and diagnosis.
//!
//! The crate builds a four-level diagnostic graph from EHR records, matches
//! patient manifestations against it, retrieves similar records and asks a
//! chat model for a structured diagnosis.

pub mod builder;
pub mod engine;
pub mod eval;
pub mod fixtures;
pub mod kg;
pub mod llm;
pub mod matcher;
pub mod questioning;
pub mod retriever;
pub mod template;
pub mod text;

pub use kg::{DiagnosticKg, KgEdge, KgError, KgNode, Level, NodeId, Relation};
pub use llm::{ChatBackend, Embedder, Embedding, LlmError};
