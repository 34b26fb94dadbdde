//! Hierarchical navigable small-world graph over scalar-quantized vectors.
//!
//! Similarity is the raw inner product between a (full-precision) query and
//! the dequantized stored vectors; no metric reduction is applied. Each node
//! draws a level `floor(-ln(u) / ln(M))`, is linked on levels `0..=level`,
//! and keeps at most `M` neighbors per upper level and `2M` on level 0.
//! Neighbor selection is plain top-M by score, and edges are kept symmetric:
//! when pruning drops `a -> b`, `b -> a` goes too.
//!
//! Snapshot layout (little-endian):
//!
//! ```text
//! "DIFARIDX" | version u32 | d u32 | n u32 | M u32 | ef_construction u32 | seed u64
//! | model fingerprint u64 | (min f32, max f32) * d | codes u8 * n * d | entry u32
//! | level count u32 | per node: level u32, then per level 0..=level:
//!   varint neighbor count, neighbor ids u32 * count
//! ```

use std::cmp::Ordering;
use std::collections::BinaryHeap;
use std::fs;
use std::io::{self, BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use integer_encoding::{VarIntReader, VarIntWriter};
use rand::Rng as _;

use crate::encoder::{dot, dot_many, EmbeddingVector};
use crate::error::{Error, Result};
use crate::seed;

use super::quant::ScalarQuantizer;
use super::ranked::{RankedEntry, RankedList};

const SNAPSHOT_MAGIC: &[u8; 8] = b"DIFARIDX";
const SNAPSHOT_VERSION: u32 = 1;
const NO_ENTRY: u32 = u32::MAX;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct HnswParams {
    /// Max neighbors per node on levels above 0 (level 0 allows `2 * m`).
    pub m: usize,
    pub ef_construction: usize,
    pub ef_search: usize,
}

impl Default for HnswParams {
    fn default() -> Self {
        HnswParams {
            m: 16,
            ef_construction: 200,
            ef_search: 256,
        }
    }
}

impl HnswParams {
    fn cap(&self, level: usize) -> usize {
        if level == 0 {
            2 * self.m
        } else {
            self.m
        }
    }

    fn level_multiplier(&self) -> f64 {
        1.0 / (self.m as f64).ln()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct HnswIndex {
    dim: usize,
    params: HnswParams,
    seed: u64,
    fingerprint: u64,
    quantizer: ScalarQuantizer,
    codes: Vec<u8>,
    /// Dequantized copy of `codes`, derived; never serialized.
    decoded: Vec<f32>,
    /// `links[node][level]` for `level in 0..=level_of(node)`.
    links: Vec<Vec<Vec<u32>>>,
    entry: Option<u32>,
}

/// Heap item ordered so that "greater" means "ranks higher":
/// larger score, then smaller id.
#[derive(Debug, Clone, Copy)]
struct Cand {
    score: f64,
    id: u32,
}

impl Cand {
    fn entry(self) -> RankedEntry {
        RankedEntry {
            id: self.id as usize,
            score: self.score,
        }
    }
}

impl Ord for Cand {
    fn cmp(&self, other: &Self) -> Ordering {
        super::ranked::rank_order(&other.entry(), &self.entry())
    }
}

impl PartialOrd for Cand {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl PartialEq for Cand {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}

impl Eq for Cand {}

/// Generation-stamped visited set, reusable across searches.
struct Visited {
    stamp: Vec<u32>,
    generation: u32,
}

impl Visited {
    fn new(n: usize) -> Self {
        Visited {
            stamp: vec![0; n],
            generation: 0,
        }
    }

    fn reset(&mut self) {
        self.generation = self.generation.wrapping_add(1);
        if self.generation == 0 {
            self.stamp.fill(0);
            self.generation = 1;
        }
    }

    /// Marks `id`; returns false if it was already marked this generation.
    fn insert(&mut self, id: u32) -> bool {
        let slot = &mut self.stamp[id as usize];
        if *slot == self.generation {
            false
        } else {
            *slot = self.generation;
            true
        }
    }
}

/// Builds the graph, inserting vectors in id order.
pub fn build_hnsw(embeddings: &[EmbeddingVector], params: HnswParams, seed: u64) -> Result<HnswIndex> {
    if params.m < 2 {
        return Err(Error::InvalidArgument("HNSW M must be at least 2".into()));
    }
    if params.ef_construction == 0 {
        return Err(Error::InvalidArgument("ef_construction must be positive".into()));
    }
    if embeddings.len() >= NO_ENTRY as usize {
        return Err(Error::InvalidArgument("too many vectors for u32 node ids".into()));
    }
    let dim = embeddings.first().map_or(0, EmbeddingVector::dim);
    if let Some(bad) = embeddings.iter().find(|e| e.dim() != dim) {
        return Err(Error::DimensionMismatch {
            expected: dim,
            actual: bad.dim(),
        });
    }
    let quantizer = ScalarQuantizer::fit(dim, embeddings.iter().map(EmbeddingVector::as_slice));
    let mut codes = Vec::with_capacity(dim * embeddings.len());
    for e in embeddings {
        codes.extend(quantizer.quantize(e).0);
    }

    let mut rng = seed::rng(seed);
    let ml = params.level_multiplier();
    let levels: Vec<usize> = (0..embeddings.len())
        .map(|_| {
            let u: f64 = 1.0 - rng.gen::<f64>();
            (-u.ln() * ml).floor() as usize
        })
        .collect();

    let mut index = HnswIndex {
        dim,
        params,
        seed,
        fingerprint: 0,
        quantizer,
        codes,
        decoded: Vec::new(),
        links: levels.iter().map(|&l| vec![Vec::new(); l + 1]).collect(),
        entry: None,
    };
    index.decode_all();

    let mut visited = Visited::new(embeddings.len());
    let mut query = vec![0.0f32; dim];
    for node in 0..embeddings.len() {
        query.copy_from_slice(index.vector(node as u32));
        index.insert(node as u32, &query, &mut visited);
    }
    Ok(index)
}

pub fn search_hnsw(index: &HnswIndex, q: &EmbeddingVector, k: usize, ef_search: usize) -> Result<RankedList> {
    index.search(q, k, ef_search)
}

impl HnswIndex {
    fn decode_all(&mut self) {
        let n = self.len();
        self.decoded = vec![0.0; n * self.dim];
        if self.dim == 0 {
            return;
        }
        for (codes, out) in self.codes.chunks_exact(self.dim).zip(self.decoded.chunks_exact_mut(self.dim)) {
            self.quantizer.dequantize_into(codes, out);
        }
    }

    pub fn len(&self) -> usize {
        self.links.len()
    }

    pub fn is_empty(&self) -> bool {
        self.links.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn params(&self) -> HnswParams {
        self.params
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn quantizer(&self) -> &ScalarQuantizer {
        &self.quantizer
    }

    pub fn entry_point(&self) -> Option<usize> {
        self.entry.map(|e| e as usize)
    }

    /// Fingerprint of the encoder whose embeddings were indexed (0 if unset).
    pub fn fingerprint(&self) -> u64 {
        self.fingerprint
    }

    pub fn set_fingerprint(&mut self, fingerprint: u64) {
        self.fingerprint = fingerprint;
    }

    pub fn codes(&self, node: usize) -> &[u8] {
        &self.codes[node * self.dim..(node + 1) * self.dim]
    }

    /// Dequantized vector of a node.
    pub fn vector(&self, node: u32) -> &[f32] {
        let i = node as usize;
        &self.decoded[i * self.dim..(i + 1) * self.dim]
    }

    pub fn level_of(&self, node: usize) -> usize {
        self.links[node].len() - 1
    }

    pub fn max_level(&self) -> Option<usize> {
        self.entry.map(|e| self.level_of(e as usize))
    }

    pub fn neighbors(&self, node: usize, level: usize) -> &[u32] {
        &self.links[node][level]
    }

    fn cand(&self, q: &[f32], id: u32) -> Cand {
        Cand {
            score: dot(q, self.vector(id)),
            id,
        }
    }

    /// Beam search on one level. Returns up to `ef` nodes, best first.
    fn search_level(&self, q: &[f32], entries: &[Cand], ef: usize, level: usize, visited: &mut Visited) -> Vec<Cand> {
        visited.reset();
        let mut frontier: BinaryHeap<Cand> = BinaryHeap::new();
        // Min-heap on rank: the worst kept result sits on top.
        let mut best: BinaryHeap<std::cmp::Reverse<Cand>> = BinaryHeap::new();
        for &e in entries {
            if visited.insert(e.id) {
                frontier.push(e);
                best.push(std::cmp::Reverse(e));
                if best.len() > ef {
                    best.pop();
                }
            }
        }
        let mut fresh: Vec<u32> = Vec::new();
        let mut scored: Vec<Cand> = Vec::new();
        while let Some(c) = frontier.pop() {
            if best.len() >= ef {
                if let Some(std::cmp::Reverse(worst)) = best.peek() {
                    if c < *worst {
                        break;
                    }
                }
            }
            fresh.clear();
            fresh.extend(self.links[c.id as usize][level].iter().copied().filter(|&nb| visited.insert(nb)));
            // Scores do not depend on the heaps, so scoring the batch up front
            // admits exactly what one-at-a-time scoring would.
            scored.clear();
            dot_many(q, fresh.iter().map(|&nb| self.vector(nb)), |score| {
                scored.push(Cand {
                    score,
                    id: fresh[scored.len()],
                })
            });
            for &cand in &scored {
                let admit = best.len() < ef || best.peek().is_some_and(|w| cand > w.0);
                if admit {
                    frontier.push(cand);
                    best.push(std::cmp::Reverse(cand));
                    if best.len() > ef {
                        best.pop();
                    }
                }
            }
        }
        let mut out: Vec<Cand> = best.into_iter().map(|r| r.0).collect();
        out.sort_unstable_by(|a, b| b.cmp(a));
        out
    }

    fn insert(&mut self, node: u32, q: &[f32], visited: &mut Visited) {
        let level = self.level_of(node as usize);
        let Some(entry) = self.entry else {
            self.entry = Some(node);
            return;
        };
        let top = self.level_of(entry as usize);
        let mut eps = vec![self.cand(q, entry)];
        for l in (level + 1..=top).rev() {
            eps = self.search_level(q, &eps, 1, l, visited);
        }
        for l in (0..=level.min(top)).rev() {
            let found = self.search_level(q, &eps, self.params.ef_construction, l, visited);
            let chosen: Vec<u32> = found
                .iter()
                .filter(|c| c.id != node)
                .take(self.params.m)
                .map(|c| c.id)
                .collect();
            self.links[node as usize][l] = chosen.clone();
            for nb in chosen {
                self.links[nb as usize][l].push(node);
                self.prune(nb, l);
            }
            eps = found;
        }
        if level > top {
            self.entry = Some(node);
        }
    }

    /// Trims `node`'s list on `level` to the degree cap, keeping its best-scoring
    /// neighbors and removing the reverse edge of every dropped one.
    fn prune(&mut self, node: u32, level: usize) {
        let cap = self.params.cap(level);
        if self.links[node as usize][level].len() <= cap {
            return;
        }
        let base = self.vector(node).to_vec();
        let mut ranked: Vec<Cand> = self.links[node as usize][level]
            .iter()
            .map(|&nb| self.cand(&base, nb))
            .collect();
        ranked.sort_unstable_by(|a, b| b.cmp(a));
        // Drop from the worst end, skipping neighbors for which this edge is
        // the last one, so no node ends up isolated on the level.
        let mut excess = ranked.len() - cap;
        let mut dropped = Vec::with_capacity(excess);
        for c in ranked.iter().rev() {
            if excess == 0 {
                break;
            }
            if self.links[c.id as usize][level].len() > 1 {
                dropped.push(c.id);
                excess -= 1;
            }
        }
        for c in ranked.iter().rev() {
            if excess == 0 {
                break;
            }
            if !dropped.contains(&c.id) {
                dropped.push(c.id);
                excess -= 1;
            }
        }
        self.links[node as usize][level].retain(|x| !dropped.contains(x));
        for d in dropped {
            self.links[d as usize][level].retain(|&x| x != node);
        }
    }

    /// Top-`k` by inner product with the dequantized vectors. The beam width
    /// is `max(ef_search, k)`.
    pub fn search(&self, q: &EmbeddingVector, k: usize, ef_search: usize) -> Result<RankedList> {
        let Some(entry) = self.entry else {
            return Ok(RankedList::default());
        };
        if q.dim() != self.dim {
            return Err(Error::DimensionMismatch {
                expected: self.dim,
                actual: q.dim(),
            });
        }
        if k == 0 {
            return Err(Error::InvalidArgument("k must be at least 1".into()));
        }
        let q = q.as_slice();
        let mut visited = Visited::new(self.len());
        let mut eps = vec![self.cand(q, entry)];
        for l in (1..=self.level_of(entry as usize)).rev() {
            eps = self.search_level(q, &eps, 1, l, &mut visited);
        }
        let found = self.search_level(q, &eps, ef_search.max(k), 0, &mut visited);
        Ok(RankedList::from_entries_unchecked(
            found.into_iter().take(k).map(Cand::entry).collect(),
        ))
    }

    /// Checks the structural invariants: level-0 membership, degree caps,
    /// symmetric adjacency, in-range ids, no self loops.
    pub fn check_invariants(&self) -> std::result::Result<(), String> {
        let n = self.len();
        for (node, per_level) in self.links.iter().enumerate() {
            if per_level.is_empty() {
                return Err(format!("node {node} missing from level 0"));
            }
            for (level, nbs) in per_level.iter().enumerate() {
                if nbs.len() > self.params.cap(level) {
                    return Err(format!("node {node} has {} neighbors on level {level}", nbs.len()));
                }
                let mut sorted = nbs.clone();
                sorted.sort_unstable();
                sorted.dedup();
                if sorted.len() != nbs.len() {
                    return Err(format!("node {node} has duplicate neighbors on level {level}"));
                }
                for &nb in nbs {
                    let nb = nb as usize;
                    if nb >= n || nb == node {
                        return Err(format!("node {node} links to invalid {nb} on level {level}"));
                    }
                    if self.level_of(nb) < level {
                        return Err(format!("node {node} links to {nb} above its level"));
                    }
                    if !self.links[nb][level].contains(&(node as u32)) {
                        return Err(format!("edge {node}->{nb} on level {level} is not symmetric"));
                    }
                }
            }
        }
        match self.entry {
            None if n > 0 => Err("non-empty index without entry point".into()),
            Some(e) if (0..n).any(|i| self.level_of(i) > self.level_of(e as usize)) => {
                Err("entry point is not on the top level".into())
            }
            _ => Ok(()),
        }
    }

    pub fn write_snapshot<W: Write>(&self, mut w: W) -> io::Result<()> {
        w.write_all(SNAPSHOT_MAGIC)?;
        w.write_u32::<LittleEndian>(SNAPSHOT_VERSION)?;
        w.write_u32::<LittleEndian>(self.dim as u32)?;
        w.write_u32::<LittleEndian>(self.len() as u32)?;
        w.write_u32::<LittleEndian>(self.params.m as u32)?;
        w.write_u32::<LittleEndian>(self.params.ef_construction as u32)?;
        w.write_u64::<LittleEndian>(self.seed)?;
        w.write_u64::<LittleEndian>(self.fingerprint)?;
        for (lo, hi) in self.quantizer.mins().iter().zip(self.quantizer.maxs()) {
            w.write_f32::<LittleEndian>(*lo)?;
            w.write_f32::<LittleEndian>(*hi)?;
        }
        w.write_all(&self.codes)?;
        w.write_u32::<LittleEndian>(self.entry.unwrap_or(NO_ENTRY))?;
        w.write_u32::<LittleEndian>(self.max_level().map_or(0, |l| l as u32 + 1))?;
        for per_level in &self.links {
            w.write_u32::<LittleEndian>(per_level.len() as u32 - 1)?;
            for nbs in per_level {
                w.write_varint(nbs.len() as u64)?;
                for &nb in nbs {
                    w.write_u32::<LittleEndian>(nb)?;
                }
            }
        }
        Ok(())
    }

    pub fn read_snapshot<R: Read>(mut r: R) -> Result<Self> {
        let bad = |e: io::Error| Error::Snapshot(format!("index snapshot truncated: {e}"));
        let corrupt = |m: String| Error::Snapshot(format!("corrupt index snapshot: {m}"));
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic).map_err(bad)?;
        if &magic != SNAPSHOT_MAGIC {
            return Err(Error::Snapshot("not an index snapshot (bad magic)".into()));
        }
        let version = r.read_u32::<LittleEndian>().map_err(bad)?;
        if version != SNAPSHOT_VERSION {
            return Err(Error::Snapshot(format!("unsupported index snapshot version {version}")));
        }
        let dim = r.read_u32::<LittleEndian>().map_err(bad)? as usize;
        let n = r.read_u32::<LittleEndian>().map_err(bad)? as usize;
        let m = r.read_u32::<LittleEndian>().map_err(bad)? as usize;
        let ef_construction = r.read_u32::<LittleEndian>().map_err(bad)? as usize;
        let seed = r.read_u64::<LittleEndian>().map_err(bad)?;
        let fingerprint = r.read_u64::<LittleEndian>().map_err(bad)?;
        let mut mins = Vec::with_capacity(dim);
        let mut maxs = Vec::with_capacity(dim);
        for _ in 0..dim {
            mins.push(r.read_f32::<LittleEndian>().map_err(bad)?);
            maxs.push(r.read_f32::<LittleEndian>().map_err(bad)?);
        }
        let mut codes = vec![0u8; n * dim];
        r.read_exact(&mut codes).map_err(bad)?;
        let entry = r.read_u32::<LittleEndian>().map_err(bad)?;
        let level_count = r.read_u32::<LittleEndian>().map_err(bad)? as usize;
        let mut links = Vec::with_capacity(n);
        for node in 0..n {
            let level = r.read_u32::<LittleEndian>().map_err(bad)? as usize;
            if level >= level_count {
                return Err(corrupt(format!("node {node} level {level} exceeds level count {level_count}")));
            }
            let mut per_level = Vec::with_capacity(level + 1);
            for _ in 0..=level {
                let count: u64 = r.read_varint().map_err(bad)?;
                if count > n as u64 {
                    return Err(corrupt(format!("node {node} claims {count} neighbors")));
                }
                let mut nbs = vec![0u32; count as usize];
                r.read_u32_into::<LittleEndian>(&mut nbs).map_err(bad)?;
                per_level.push(nbs);
            }
            links.push(per_level);
        }
        let mut rest = [0u8; 1];
        if r.read(&mut rest).map_err(bad)? != 0 {
            return Err(corrupt("trailing bytes".into()));
        }
        let entry = match entry {
            NO_ENTRY if n == 0 => None,
            e if (e as usize) < n => Some(e),
            e => return Err(corrupt(format!("entry point {e} out of range"))),
        };
        let mut index = HnswIndex {
            dim,
            params: HnswParams {
                m,
                ef_construction,
                ..HnswParams::default()
            },
            seed,
            fingerprint,
            quantizer: ScalarQuantizer::new(mins, maxs),
            codes,
            decoded: Vec::new(),
            links,
            entry,
        };
        index.check_invariants().map_err(corrupt)?;
        index.decode_all();
        Ok(index)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(f);
        self.write_snapshot(&mut w).map_err(|e| Error::io(path, e))?;
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let f = fs::File::open(path).map_err(|e| Error::io(path, e))?;
        Self::read_snapshot(BufReader::new(f))
    }
}
