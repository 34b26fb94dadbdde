//! Query-time retrieval: encode the query, search the triplet index.

use std::fmt;
use std::str::FromStr;

use crate::encoder::{EmbeddingVector, EncoderModel};
use crate::error::{Error, Result};
use crate::index::{build_exact, build_hnsw, ExactIndex, HnswIndex, HnswParams, RankedList};
use crate::kg_store::KgStore;

pub const DEFAULT_K: usize = 1000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Backend {
    Exact,
    #[default]
    Hnsw,
}

impl fmt::Display for Backend {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Backend::Exact => "exact",
            Backend::Hnsw => "hnsw",
        })
    }
}

impl FromStr for Backend {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "exact" => Ok(Backend::Exact),
            "hnsw" => Ok(Backend::Hnsw),
            other => Err(Error::InvalidArgument(format!("unknown backend {other:?} (expected exact or hnsw)"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RetrievalConfig {
    pub k: usize,
    pub backend: Backend,
    /// Overrides the index's default beam width. Never narrower than `k`.
    pub ef_search: Option<usize>,
}

impl Default for RetrievalConfig {
    fn default() -> Self {
        RetrievalConfig {
            k: DEFAULT_K,
            backend: Backend::default(),
            ef_search: None,
        }
    }
}

/// Encoder, store, and the indexes built from them.
///
/// The exact index is always derived from the model and store. An HNSW
/// index can only be attached if it records this model's fingerprint, which
/// rules out searching embeddings produced by a different encoder.
#[derive(Debug, Clone)]
pub struct RetrieverBundle {
    model: EncoderModel,
    fingerprint: u64,
    store: KgStore,
    exact: Option<ExactIndex>,
    hnsw: Option<HnswIndex>,
}

impl RetrieverBundle {
    pub fn new(model: EncoderModel, store: KgStore) -> Result<Self> {
        let exact = if store.is_empty() {
            None
        } else {
            Some(build_exact(&model.encode_store(&store))?)
        };
        Ok(RetrieverBundle {
            fingerprint: model.fingerprint(),
            model,
            store,
            exact,
            hnsw: None,
        })
    }

    /// Builds an HNSW index over the store's embeddings, stamped with the
    /// model fingerprint.
    pub fn build_hnsw(&self, params: HnswParams, seed: u64) -> Result<HnswIndex> {
        let embeddings: Vec<EmbeddingVector> = match &self.exact {
            Some(exact) => (0..exact.len()).map(|i| EmbeddingVector(exact.vector(i).to_vec())).collect(),
            None => Vec::new(),
        };
        let mut index = build_hnsw(&embeddings, params, seed)?;
        index.set_fingerprint(self.fingerprint);
        Ok(index)
    }

    pub fn with_hnsw(mut self, index: HnswIndex) -> Result<Self> {
        if index.fingerprint() != self.fingerprint {
            return Err(Error::StaleIndex {
                index: index.fingerprint(),
                model: self.fingerprint,
            });
        }
        if index.len() != self.store.len() {
            return Err(Error::InvalidArgument(format!(
                "index holds {} vectors but the store has {} triplets",
                index.len(),
                self.store.len()
            )));
        }
        self.hnsw = Some(index);
        Ok(self)
    }

    pub fn model(&self) -> &EncoderModel {
        &self.model
    }

    pub fn store(&self) -> &KgStore {
        &self.store
    }

    pub fn exact(&self) -> Option<&ExactIndex> {
        self.exact.as_ref()
    }

    pub fn hnsw(&self) -> Option<&HnswIndex> {
        self.hnsw.as_ref()
    }

    pub fn fingerprint(&self) -> u64 {
        self.fingerprint
    }

    /// Top `min(k, n)` triplets for a query text.
    pub fn retrieve(&self, query_text: &str, config: &RetrievalConfig) -> Result<RankedList> {
        self.retrieve_embedding(&self.model.encode_text(query_text), config)
    }

    pub fn retrieve_embedding(&self, q: &EmbeddingVector, config: &RetrievalConfig) -> Result<RankedList> {
        if config.k == 0 {
            return Err(Error::InvalidArgument("k must be at least 1".into()));
        }
        let Some(exact) = &self.exact else {
            return Ok(RankedList::default());
        };
        match config.backend {
            Backend::Exact => exact.search(q, config.k),
            Backend::Hnsw => {
                let index = self
                    .hnsw
                    .as_ref()
                    .ok_or_else(|| Error::InvalidArgument("hnsw backend requested but no index attached".into()))?;
                let ef = config.ef_search.unwrap_or(index.params().ef_search);
                index.search(q, config.k, ef)
            }
        }
    }

    /// Exact top-`k` restricted to the given triplet ids.
    pub fn retrieve_among(&self, q: &EmbeddingVector, candidates: &[usize], k: usize) -> Result<RankedList> {
        match &self.exact {
            Some(exact) => exact.search_among(q, candidates, k),
            None => Ok(RankedList::default()),
        }
    }
}
