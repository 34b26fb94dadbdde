//! Direct fact retrieval over knowledge graphs.
//!
//! Triplets and queries are embedded by one shared bi-encoder; facts are
//! retrieved by inner product through an exact scan or an HNSW graph over
//! int8-quantized vectors, and the top of the list is refined by a reranker
//! that scores the query and triplet jointly.

pub mod encoder;
pub mod error;
pub mod evaluator;
pub mod index;
pub mod kg_store;
pub mod pipeline;
pub mod query;
pub mod reranker;
pub mod retriever;
pub mod seed;
pub mod synth;
pub mod verbalizer;

pub use encoder::{EmbeddingVector, EncoderConfig, EncoderModel};
pub use error::{Error, Result};
pub use evaluator::{evaluate, EvalOptions, EvalReport};
pub use index::{ExactIndex, HnswIndex, HnswParams, RankedEntry, RankedList};
pub use kg_store::{KgStore, Triplet};
pub use query::{Query, QueryResult};
pub use reranker::{RerankerConfig, RerankerModel};
pub use synth::{generate, SynthConfig, SynthDataset};
pub use retriever::{Backend, RetrievalConfig, RetrieverBundle};
pub use verbalizer::{concat_pair, tokenize, verbalize_triplet, TokenSequence, SEP};
