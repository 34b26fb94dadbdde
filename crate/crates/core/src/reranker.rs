//! Joint query/triplet scorer used to reorder the head of a retrieved list.
//!
//! Unlike the bi-encoder, the score of a pair is not a function of two
//! independent encodings: besides the pooled token embeddings of each side,
//! the logit sees the token overlap between the query and the triplet and
//! the inner product of the two pooled vectors.
//!
//! ```text
//! features = [pool(x); pool(t); |x ∩ t|; |x ∩ t| / |x ∪ t|; pool(x) · pool(t)]
//! score    = sigmoid(weights · features + bias)
//! ```
//!
//! Training uses binary cross-entropy on gold pairs and hard negatives mined
//! from the retriever's own top-K, refreshed every few epochs.

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};
use std::fs;
use std::io::{self, BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use rand::seq::{index, SliceRandom};
use rand::Rng as _;
use rayon::prelude::*;

use crate::encoder::{bucket, Trained};
use crate::error::{Error, Result};
use crate::index::{rank_order, RankedEntry, RankedList};
use crate::kg_store::KgStore;
use crate::query::Query;
use crate::retriever::RetrieverBundle;
use crate::seed;
use crate::verbalizer::{tokenize, verbalize_triplet, TokenSequence, SEP};

pub const DEFAULT_DIM: usize = 32;
pub const DEFAULT_BUCKETS: usize = 1 << 16;
pub const DEFAULT_TOP_K: usize = 100;

const SNAPSHOT_MAGIC: &[u8; 8] = b"DIFARRRK";
const SNAPSHOT_VERSION: u32 = 1;
const INIT_SCALE: f32 = 0.3;
/// Starting weight on the pooled-dot interaction. With the weight at zero the
/// table receives no gradient through the dot term and training stalls on a
/// plateau for many epochs; a large start lets alias/label alignment begin
/// immediately.
const INIT_DOT_WEIGHT: f32 = 100.0;
const PROB_CLAMP: f64 = 1e-7;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RerankerConfig {
    pub buckets: usize,
    pub dim: usize,
}

impl Default for RerankerConfig {
    fn default() -> Self {
        RerankerConfig {
            buckets: DEFAULT_BUCKETS,
            dim: DEFAULT_DIM,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RerankerModel {
    buckets: usize,
    dim: usize,
    table: Vec<f32>,
    /// `2 * dim + 3`: query pool, triplet pool, overlap count, overlap ratio, pool dot.
    weights: Vec<f32>,
    bias: f32,
}

/// Everything the logit depends on for one pair.
struct PairFeatures {
    rows_x: Vec<usize>,
    rows_t: Vec<usize>,
    pool_x: Vec<f64>,
    pool_t: Vec<f64>,
    overlap: f64,
    ratio: f64,
    pool_dot: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RerankerGradients {
    pub rows: BTreeMap<usize, Vec<f64>>,
    pub weights: Vec<f64>,
    pub bias: f64,
}

impl RerankerModel {
    /// Uniform `[-0.3, 0.3]` table, zero bias, and all weights zero except
    /// the pooled-dot interaction.
    pub fn new(config: RerankerConfig, seed: u64) -> Self {
        assert!(config.buckets > 0 && config.dim > 0, "buckets and dim must be positive");
        let mut rng = seed::rng(seed);
        let mut weights = vec![0.0; 2 * config.dim + 3];
        weights[2 * config.dim + 2] = INIT_DOT_WEIGHT;
        RerankerModel {
            buckets: config.buckets,
            dim: config.dim,
            table: (0..config.buckets * config.dim)
                .map(|_| rng.gen_range(-INIT_SCALE..=INIT_SCALE))
                .collect(),
            weights,
            bias: 0.0,
        }
    }

    pub fn zeros(config: RerankerConfig) -> Self {
        RerankerModel {
            buckets: config.buckets,
            dim: config.dim,
            table: vec![0.0; config.buckets * config.dim],
            weights: vec![0.0; 2 * config.dim + 3],
            bias: 0.0,
        }
    }

    pub fn config(&self) -> RerankerConfig {
        RerankerConfig {
            buckets: self.buckets,
            dim: self.dim,
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn table(&self) -> &[f32] {
        &self.table
    }

    pub fn table_mut(&mut self) -> &mut [f32] {
        &mut self.table
    }

    pub fn weights(&self) -> &[f32] {
        &self.weights
    }

    pub fn weights_mut(&mut self) -> &mut [f32] {
        &mut self.weights
    }

    pub fn bias(&self) -> f32 {
        self.bias
    }

    pub fn set_bias(&mut self, bias: f32) {
        self.bias = bias;
    }

    /// Index of the overlap-count weight; the ratio and pool-dot weights follow it.
    pub fn overlap_weight_index(&self) -> usize {
        2 * self.dim
    }

    fn pool(&self, tokens: &[&str]) -> (Vec<usize>, Vec<f64>) {
        let rows: Vec<usize> = tokens.iter().map(|t| bucket(t, self.buckets)).collect();
        let mut pooled = vec![0.0; self.dim];
        if !rows.is_empty() {
            for &r in &rows {
                for (p, v) in pooled.iter_mut().zip(&self.table[r * self.dim..(r + 1) * self.dim]) {
                    *p += f64::from(*v);
                }
            }
            let inv = 1.0 / rows.len() as f64;
            pooled.iter_mut().for_each(|p| *p *= inv);
        }
        (rows, pooled)
    }

    fn features(&self, x: &TokenSequence, t: &TokenSequence) -> PairFeatures {
        let xs: Vec<&str> = x.iter().filter(|&w| w != SEP).collect();
        let ts: Vec<&str> = t.iter().filter(|&w| w != SEP).collect();
        let set_x: HashSet<&str> = xs.iter().copied().collect();
        let set_t: HashSet<&str> = ts.iter().copied().collect();
        let overlap = set_x.intersection(&set_t).count() as f64;
        let union = set_x.union(&set_t).count() as f64;
        let ratio = if union > 0.0 { overlap / union } else { 0.0 };
        let (rows_x, pool_x) = self.pool(&xs);
        let (rows_t, pool_t) = self.pool(&ts);
        let pool_dot = pool_x.iter().zip(&pool_t).map(|(a, b)| a * b).sum();
        PairFeatures {
            rows_x,
            rows_t,
            pool_x,
            pool_t,
            overlap,
            ratio,
            pool_dot,
        }
    }

    fn logit(&self, f: &PairFeatures) -> f64 {
        let d = self.dim;
        let w = &self.weights;
        let mut z = f64::from(self.bias);
        for j in 0..d {
            z += f64::from(w[j]) * f.pool_x[j] + f64::from(w[d + j]) * f.pool_t[j];
        }
        z + f64::from(w[2 * d]) * f.overlap + f64::from(w[2 * d + 1]) * f.ratio + f64::from(w[2 * d + 2]) * f.pool_dot
    }

    /// Relevance of a (query, verbalized triplet) pair, in `(0, 1)`.
    pub fn score_pair(&self, x: &TokenSequence, t: &TokenSequence) -> f64 {
        sigmoid(self.logit(&self.features(x, t)))
    }

    fn backward(&self, f: &PairFeatures, d_logit: f64, grads: &mut RerankerGradients) {
        let d = self.dim;
        let w = &self.weights;
        grads.bias += d_logit;
        for j in 0..d {
            grads.weights[j] += d_logit * f.pool_x[j];
            grads.weights[d + j] += d_logit * f.pool_t[j];
        }
        grads.weights[2 * d] += d_logit * f.overlap;
        grads.weights[2 * d + 1] += d_logit * f.ratio;
        grads.weights[2 * d + 2] += d_logit * f.pool_dot;
        let w_dot = f64::from(w[2 * d + 2]);
        for (rows, other, offset) in [(&f.rows_x, &f.pool_t, 0), (&f.rows_t, &f.pool_x, d)] {
            if rows.is_empty() {
                continue;
            }
            let inv = 1.0 / rows.len() as f64;
            let d_pool: Vec<f64> = (0..d)
                .map(|j| d_logit * (f64::from(w[offset + j]) + w_dot * other[j]) * inv)
                .collect();
            for &r in rows {
                let g = grads.rows.entry(r).or_insert_with(|| vec![0.0; d]);
                for (gj, dj) in g.iter_mut().zip(&d_pool) {
                    *gj += dj;
                }
            }
        }
    }

    pub fn apply_gradients(&mut self, grads: &RerankerGradients, lr: f64) {
        let d = self.dim;
        for (&r, g) in &grads.rows {
            for (p, gj) in self.table[r * d..(r + 1) * d].iter_mut().zip(g) {
                *p = (f64::from(*p) - lr * gj) as f32;
            }
        }
        for (p, g) in self.weights.iter_mut().zip(&grads.weights) {
            *p = (f64::from(*p) - lr * g) as f32;
        }
        self.bias = (f64::from(self.bias) - lr * grads.bias) as f32;
    }

    pub fn write_snapshot<W: Write>(&self, mut w: W) -> io::Result<()> {
        w.write_all(SNAPSHOT_MAGIC)?;
        w.write_u32::<LittleEndian>(SNAPSHOT_VERSION)?;
        w.write_u32::<LittleEndian>(self.buckets as u32)?;
        w.write_u32::<LittleEndian>(self.dim as u32)?;
        for v in self.table.iter().chain(&self.weights).chain(std::iter::once(&self.bias)) {
            w.write_f32::<LittleEndian>(*v)?;
        }
        Ok(())
    }

    pub fn read_snapshot<R: Read>(mut r: R) -> Result<Self> {
        let bad = |e: io::Error| Error::Snapshot(format!("reranker snapshot truncated: {e}"));
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic).map_err(bad)?;
        if &magic != SNAPSHOT_MAGIC {
            return Err(Error::Snapshot("not a reranker snapshot (bad magic)".into()));
        }
        let version = r.read_u32::<LittleEndian>().map_err(bad)?;
        if version != SNAPSHOT_VERSION {
            return Err(Error::Snapshot(format!("unsupported reranker snapshot version {version}")));
        }
        let buckets = r.read_u32::<LittleEndian>().map_err(bad)? as usize;
        let dim = r.read_u32::<LittleEndian>().map_err(bad)? as usize;
        if buckets == 0 || dim == 0 {
            return Err(Error::Snapshot("zero buckets or dimension".into()));
        }
        let mut params = vec![0.0f32; buckets * dim + 2 * dim + 3 + 1];
        r.read_f32_into::<LittleEndian>(&mut params).map_err(bad)?;
        if params.iter().any(|v| !v.is_finite()) {
            return Err(Error::Snapshot("non-finite parameter".into()));
        }
        let mut rest = [0u8; 1];
        if r.read(&mut rest).map_err(bad)? != 0 {
            return Err(Error::Snapshot("trailing bytes after reranker snapshot".into()));
        }
        let bias = params.pop().expect("non-empty");
        let weights = params.split_off(buckets * dim);
        Ok(RerankerModel {
            buckets,
            dim,
            table: params,
            weights,
            bias,
        })
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

fn sigmoid(z: f64) -> f64 {
    let p = if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    };
    p.clamp(f64::MIN_POSITIVE, 1.0 - f64::EPSILON / 2.0)
}

/// One training example for the reranker.
#[derive(Debug, Clone)]
pub struct LabeledPair {
    pub query: TokenSequence,
    pub triplet: TokenSequence,
    /// 1.0 for relevant, 0.0 for irrelevant.
    pub label: f64,
}

fn check_pairs(batch: &[LabeledPair]) -> Result<()> {
    if batch.is_empty() {
        return Err(Error::InvalidArgument("empty reranker batch".into()));
    }
    if let Some(p) = batch.iter().find(|p| p.label != 0.0 && p.label != 1.0) {
        return Err(Error::InvalidArgument(format!("label must be 0 or 1, got {}", p.label)));
    }
    Ok(())
}

/// Mean binary cross-entropy with probabilities clamped to `[1e-7, 1 - 1e-7]`.
pub fn bce_loss(model: &RerankerModel, batch: &[LabeledPair]) -> Result<f64> {
    check_pairs(batch)?;
    let total: f64 = batch
        .iter()
        .map(|p| {
            let prob = model.score_pair(&p.query, &p.triplet).clamp(PROB_CLAMP, 1.0 - PROB_CLAMP);
            -(p.label * prob.ln() + (1.0 - p.label) * (1.0 - prob).ln())
        })
        .sum();
    Ok(total / batch.len() as f64)
}

/// Loss and exact gradients. Pairs whose probability sits outside the clamp
/// range contribute zero gradient, matching the clamped loss.
pub fn bce_loss_and_gradients(model: &RerankerModel, batch: &[LabeledPair]) -> Result<(f64, RerankerGradients)> {
    check_pairs(batch)?;
    let n = batch.len() as f64;
    let mut grads = RerankerGradients {
        rows: BTreeMap::new(),
        weights: vec![0.0; model.weights.len()],
        bias: 0.0,
    };
    let mut total = 0.0;
    for p in batch {
        let f = model.features(&p.query, &p.triplet);
        let prob = sigmoid(model.logit(&f));
        let clamped = prob.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP);
        total += -(p.label * clamped.ln() + (1.0 - p.label) * (1.0 - clamped).ln());
        if clamped == prob {
            model.backward(&f, (prob - p.label) / n, &mut grads);
        }
    }
    Ok((total / n, grads))
}

pub fn bce_gradients(model: &RerankerModel, batch: &[LabeledPair]) -> Result<RerankerGradients> {
    bce_loss_and_gradients(model, batch).map(|(_, g)| g)
}

/// Hard negatives for each query, in retrieval order.
#[derive(Debug, Clone, PartialEq)]
pub struct MinedNegatives {
    pub per_query: Vec<Vec<usize>>,
    pub epoch: usize,
    pub top_k: usize,
    pub subset_fraction: f64,
}

/// Retrieves the top-`top_k` triplets for each query over a seeded uniform
/// sample of `ceil(subset_fraction * n)` triplets (plus the query's golds),
/// then drops the golds.
pub fn mine_negatives(
    bundle: &RetrieverBundle,
    queries: &[Query],
    subset_fraction: f64,
    top_k: usize,
    seed: u64,
) -> Result<MinedNegatives> {
    if !(subset_fraction > 0.0 && subset_fraction <= 1.0) {
        return Err(Error::InvalidArgument(format!("subset fraction must be in (0, 1], got {subset_fraction}")));
    }
    if top_k == 0 {
        return Err(Error::InvalidArgument("mining top-k must be at least 1".into()));
    }
    let n = bundle.store().len();
    if n == 0 {
        return Err(Error::InvalidArgument("cannot mine negatives from an empty store".into()));
    }
    let pool_size = ((subset_fraction * n as f64).ceil() as usize).clamp(1, n);
    let mut rng = seed::rng(seed);
    let mut pool: Vec<usize> = index::sample(&mut rng, n, pool_size).into_vec();
    pool.sort_unstable();

    let per_query = queries
        .par_iter()
        .map(|q| {
            for &g in &q.gold {
                bundle.store().get(g)?;
            }
            let golds: BTreeSet<usize> = q.gold.iter().copied().collect();
            let candidates: Vec<usize> = pool
                .iter()
                .copied()
                .collect::<BTreeSet<_>>()
                .union(&golds)
                .copied()
                .collect();
            if candidates.is_empty() {
                return Err(Error::InvalidArgument(format!("empty candidate pool for query {}", q.id)));
            }
            let emb = bundle.model().encode_text(&q.text);
            let ranked = bundle.retrieve_among(&emb, &candidates, top_k)?;
            Ok(ranked.iter().map(|e| e.id).filter(|id| !golds.contains(id)).collect())
        })
        .collect::<Result<Vec<Vec<usize>>>>()?;
    Ok(MinedNegatives {
        per_query,
        epoch: 0,
        top_k,
        subset_fraction,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RerankerTrainConfig {
    pub epochs: usize,
    /// Epochs between negative-mining rounds.
    pub refresh_interval: usize,
    pub negatives_per_query: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Retrieval depth used for mining.
    pub top_k: usize,
    pub subset_fraction: f64,
    pub seed: u64,
}

impl Default for RerankerTrainConfig {
    fn default() -> Self {
        RerankerTrainConfig {
            epochs: 30,
            refresh_interval: 10,
            negatives_per_query: 4,
            batch_size: 64,
            learning_rate: 0.05,
            top_k: DEFAULT_TOP_K,
            subset_fraction: 0.1,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct RerankerTraining {
    pub trained: Trained<RerankerModel>,
    /// Epoch at which each mining round ran.
    pub mining_epochs: Vec<usize>,
}

/// BCE training with hard negatives re-mined every `refresh_interval` epochs.
pub fn train_reranker(
    mut model: RerankerModel,
    queries: &[Query],
    bundle: &RetrieverBundle,
    config: &RerankerTrainConfig,
) -> Result<RerankerTraining> {
    if config.refresh_interval == 0 {
        return Err(Error::InvalidArgument("refresh interval must be at least 1".into()));
    }
    let store = bundle.store();
    crate::encoder::validate_training(queries, store, config.learning_rate, config.batch_size)?;
    let mut rng = seed::rng(config.seed);
    let query_tokens: Vec<TokenSequence> = queries.iter().map(|q| tokenize(&q.text)).collect();
    let mut triplet_tokens: HashMap<usize, TokenSequence> = HashMap::new();
    let mut verbalized = |id: usize, store: &KgStore| -> Result<TokenSequence> {
        if let Some(t) = triplet_tokens.get(&id) {
            return Ok(t.clone());
        }
        let t = verbalize_triplet(store.get(id)?);
        triplet_tokens.insert(id, t.clone());
        Ok(t)
    };

    let mut mined: Option<MinedNegatives> = None;
    let mut mining_epochs = Vec::new();
    let mut epoch_losses = Vec::with_capacity(config.epochs);
    for epoch in 0..config.epochs {
        if epoch % config.refresh_interval == 0 {
            let round_seed = seed::sub_seed(config.seed, &format!("mine-{epoch}"));
            let mut m = mine_negatives(bundle, queries, config.subset_fraction, config.top_k, round_seed)?;
            m.epoch = epoch;
            mined = Some(m);
            mining_epochs.push(epoch);
        }
        let negatives = &mined.as_ref().expect("mined at epoch 0").per_query;
        let mut pairs = Vec::new();
        for (qi, q) in queries.iter().enumerate() {
            for &g in &q.gold {
                pairs.push(LabeledPair {
                    query: query_tokens[qi].clone(),
                    triplet: verbalized(g, store)?,
                    label: 1.0,
                });
            }
            let pool = &negatives[qi];
            let take = config.negatives_per_query.min(pool.len());
            for i in index::sample(&mut rng, pool.len(), take) {
                pairs.push(LabeledPair {
                    query: query_tokens[qi].clone(),
                    triplet: verbalized(pool[i], store)?,
                    label: 0.0,
                });
            }
        }
        pairs.shuffle(&mut rng);
        let mut total = 0.0;
        for batch in pairs.chunks(config.batch_size) {
            let (loss, grads) = bce_loss_and_gradients(&model, batch)?;
            total += loss * batch.len() as f64;
            model.apply_gradients(&grads, config.learning_rate);
        }
        epoch_losses.push(total / pairs.len() as f64);
    }
    Ok(RerankerTraining {
        trained: Trained { model, epoch_losses },
        mining_epochs,
    })
}

/// Re-scores the first `top_k` entries with the reranker and sorts them
/// (score desc, id asc); entries past `top_k` keep their retriever order
/// and scores. Output length equals input length.
pub fn rerank(
    model: &RerankerModel,
    query_text: &str,
    ranked: &RankedList,
    store: &KgStore,
    top_k: usize,
) -> Result<RankedList> {
    if top_k == 0 {
        return Err(Error::InvalidArgument("rerank top-k must be at least 1".into()));
    }
    let x = tokenize(query_text);
    let cut = top_k.min(ranked.len());
    let mut head = ranked.entries()[..cut]
        .iter()
        .map(|e| {
            let t = verbalize_triplet(store.get(e.id)?);
            Ok(RankedEntry {
                id: e.id,
                score: model.score_pair(&x, &t),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    head.sort_by(rank_order);
    head.extend_from_slice(&ranked.entries()[cut..]);
    Ok(RankedList::from_entries_unchecked(head))
}
