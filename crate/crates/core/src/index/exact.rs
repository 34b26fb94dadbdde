use crate::encoder::{dot_many, EmbeddingVector};
#[cfg(doc)]
use crate::encoder::dot;
use crate::error::{Error, Result};

use super::RankedList;

const LANES: usize = 8;

/// Full-precision vectors, scanned exhaustively. Id = insertion position.
///
/// Besides the row-major copy, vectors are stored in blocks of eight with
/// their components interleaved (`block[j * 8 + lane]`), so one pass over a
/// block advances eight independent accumulators with contiguous loads. Each
/// score is still summed in component order and equals [`dot`] bit for bit.
#[derive(Debug, Clone, PartialEq)]
pub struct ExactIndex {
    dim: usize,
    data: Vec<f32>,
    blocks: Vec<f32>,
}

fn interleave(data: &[f32], dim: usize) -> Vec<f32> {
    let n = data.len() / dim;
    let mut blocks = vec![0.0; n.div_ceil(LANES) * LANES * dim];
    for (i, row) in data.chunks_exact(dim).enumerate() {
        let base = (i / LANES) * LANES * dim + i % LANES;
        for (j, &v) in row.iter().enumerate() {
            blocks[base + j * LANES] = v;
        }
    }
    blocks
}

fn scan_block(q: &[f32], block: &[f32]) -> [f64; LANES] {
    let mut acc = [0.0f64; LANES];
    for (&x, col) in q.iter().zip(block.chunks_exact(LANES)) {
        let x = f64::from(x);
        for (a, &v) in acc.iter_mut().zip(col) {
            *a += x * f64::from(v);
        }
    }
    acc
}

pub fn build_exact(embeddings: &[EmbeddingVector]) -> Result<ExactIndex> {
    let first = embeddings
        .first()
        .ok_or_else(|| Error::InvalidArgument("cannot index an empty collection".into()))?;
    let dim = first.dim();
    let mut data = Vec::with_capacity(dim * embeddings.len());
    for e in embeddings {
        if e.dim() != dim {
            return Err(Error::DimensionMismatch {
                expected: dim,
                actual: e.dim(),
            });
        }
        data.extend_from_slice(e.as_slice());
    }
    let blocks = interleave(&data, dim);
    Ok(ExactIndex { dim, data, blocks })
}

impl ExactIndex {
    pub fn len(&self) -> usize {
        self.data.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn vector(&self, id: usize) -> &[f32] {
        &self.data[id * self.dim..(id + 1) * self.dim]
    }

    fn check_query(&self, q: &EmbeddingVector, k: usize) -> Result<()> {
        if q.dim() != self.dim {
            return Err(Error::DimensionMismatch {
                expected: self.dim,
                actual: q.dim(),
            });
        }
        if k == 0 {
            return Err(Error::InvalidArgument("k must be at least 1".into()));
        }
        Ok(())
    }

    /// The `k` highest inner products (all of them when `k > n`).
    pub fn search(&self, q: &EmbeddingVector, k: usize) -> Result<RankedList> {
        self.check_query(q, k)?;
        let n = self.len();
        let scores = self
            .blocks
            .chunks_exact(self.dim * LANES)
            .flat_map(|block| scan_block(q.as_slice(), block))
            .take(n)
            .enumerate();
        Ok(RankedList::top_k(scores, k))
    }

    /// Like [`search`](Self::search) but restricted to `candidates`.
    pub fn search_among(&self, q: &EmbeddingVector, candidates: &[usize], k: usize) -> Result<RankedList> {
        self.check_query(q, k)?;
        if let Some(&bad) = candidates.iter().find(|&&id| id >= self.len()) {
            return Err(Error::OutOfRange { id: bad, len: self.len() });
        }
        let mut scores = Vec::with_capacity(candidates.len());
        dot_many(q.as_slice(), candidates.iter().map(|&id| self.vector(id)), |s| {
            scores.push((candidates[scores.len()], s))
        });
        Ok(RankedList::top_k(scores, k))
    }
}

pub fn search_exact(index: &ExactIndex, q: &EmbeddingVector, k: usize) -> Result<RankedList> {
    index.search(q, k)
}
