//! Triplet-embedding indexes.
//!
//! [`ExactIndex`] is a brute-force inner-product scan over full-precision
//! vectors. [`HnswIndex`] is a hierarchical navigable small-world graph over
//! int8 scalar-quantized vectors. Both return a [`RankedList`] ordered by
//! score descending, ties broken by ascending id.

mod exact;
mod hnsw;
mod quant;
mod ranked;

pub use exact::{build_exact, search_exact, ExactIndex};
pub use hnsw::{build_hnsw, search_hnsw, HnswIndex, HnswParams};
pub use quant::{QuantizedVector, ScalarQuantizer};
pub use ranked::{rank_order, RankedEntry, RankedList};
