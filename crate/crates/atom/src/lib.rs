//! Streaming construction and continuous update of dynamic temporal
//! knowledge graphs from unstructured, timestamped text.
//!
//! Documents are decomposed into atomic facts, temporal 5-tuples are
//! extracted per fact into small graphs, and those graphs are consolidated
//! through a parallel pairwise merge with embedding-based entity, relation,
//! and temporal resolution. Validity time (when a fact holds) is modeled
//! separately from observation time (when it was seen).

pub mod cli;
pub mod embedding;
pub mod evaluation;
pub mod extraction;
pub mod gateway;
pub mod merge;
pub mod model;
pub mod pipeline;
pub mod storage;
pub mod synthetic;

pub use embedding::{cosine, entity_similarity, relation_similarity, Embedder, EmbeddingVector, SimilarityConfig};
pub use extraction::{chunk_document, estimate_tokens, AtomicFact, Chunk, Document, Extractor};
pub use gateway::{BackendConfig, CompletionRequest, Gateway};
pub use merge::{binary_merge, parallel_merge, update_dtkg, MergeConfig};
pub use model::{normalize_name, Entity, EntityKey, TemporalRelation, TimeList, Timestamp, Tkg};
pub use pipeline::{group_by_observation, ObservationBatch, Pipeline, PipelineConfig};
