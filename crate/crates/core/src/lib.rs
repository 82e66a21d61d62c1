//! Toxicity detection backed by a knowledge graph of toxic-speech triplets.
//!
//! The graph is built from labelled corpora with an LLM (rationale, triplet
//! extraction, self-check) followed by embedding-based entity and relation
//! resolution. At detection time the entities of a post are mapped onto the
//! graph, connecting paths are retrieved and ranked, and the surviving
//! triplets are handed to the classifier as plain sentences.

pub mod config;
pub mod corpus;
pub mod detect;
pub mod embedding;
pub mod kg_build;
pub mod kg_store;
pub mod llm_gateway;
pub mod query;
pub mod transport;

pub use corpus::{Label, LabelMap, Sample};
pub use detect::{DetectionRecord, Knowledge, MetricsReport, Mode};
pub use embedding::{Embedder, EmbeddingVector, TestEmbedder};
pub use kg_build::{AuditEvent, BuildConfig, BuildOutput, ClusterMap, Triplet};
pub use kg_store::KnowledgeGraph;
pub use llm_gateway::{LlmGateway, LlmProvider, OptionScore, PromptRole, TemplateSet};
pub use query::{KnowledgeItem, QueryConfig, RetrievedKnowledge, Spo, Strategy};
