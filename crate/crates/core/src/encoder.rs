//! Bi-encoder shared by queries and triplets.
//!
//! Tokens are hashed into a bucketed embedding table, mean-pooled, passed
//! through an affine projection and optionally L2-normalized. Relevance is
//! the dot product of two encodings, and training minimizes an in-batch
//! softmax contrastive loss with hand-derived gradients and plain SGD.

use std::collections::BTreeMap;
use std::fs;
use std::io::{self, BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use rand::seq::SliceRandom;
use rand::Rng as _;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::kg_store::KgStore;
use crate::query::Query;
use crate::seed::{self, fnv1a, HashingWriter};
use crate::verbalizer::{tokenize, verbalize_triplet, TokenSequence};

pub const DEFAULT_DIM: usize = 64;
pub const DEFAULT_BUCKETS: usize = 1 << 16;

const SNAPSHOT_MAGIC: &[u8; 8] = b"DIFARENC";
const SNAPSHOT_VERSION: u32 = 1;
const INIT_SCALE: f32 = 0.05;

/// Dense vector produced by an encoder.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingVector(pub Vec<f32>);

impl EmbeddingVector {
    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn as_slice(&self) -> &[f32] {
        &self.0
    }

    pub fn norm(&self) -> f64 {
        dot(&self.0, &self.0).sqrt()
    }
}

/// Inner product accumulated left to right in `f64`. Every search path uses
/// this one routine so scores are comparable bit for bit.
#[inline]
pub fn dot(a: &[f32], b: &[f32]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = 0.0f64;
    for (x, y) in a.iter().zip(b) {
        acc += f64::from(*x) * f64::from(*y);
    }
    acc
}

const LANES: usize = 8;

#[inline]
fn dot_lanes(q: &[f32], rows: &[&[f32]; LANES]) -> [f64; LANES] {
    let rows = rows.map(|r| &r[..q.len()]);
    let mut acc = [0.0f64; LANES];
    for (j, &x) in q.iter().enumerate() {
        let x = f64::from(x);
        for (a, r) in acc.iter_mut().zip(&rows) {
            *a += x * f64::from(r[j]);
        }
    }
    acc
}

/// [`dot`] of `q` against many rows, emitted in row order.
///
/// Each score is bit-identical to `dot(q, row)`: rows are processed in
/// groups whose accumulators are independent, which only buys
/// instruction-level parallelism, never a different summation order.
pub fn dot_many<'a>(q: &[f32], rows: impl IntoIterator<Item = &'a [f32]>, mut emit: impl FnMut(f64)) {
    let mut block: [&[f32]; LANES] = [&[]; LANES];
    let mut filled = 0;
    for row in rows {
        assert_eq!(row.len(), q.len(), "row dimension");
        block[filled] = row;
        filled += 1;
        if filled == LANES {
            dot_lanes(q, &block).into_iter().for_each(&mut emit);
            filled = 0;
        }
    }
    for row in &block[..filled] {
        emit(dot(q, row));
    }
}

/// Scoring function between a query and a triplet encoding.
pub fn score(q: &EmbeddingVector, t: &EmbeddingVector) -> Result<f64> {
    if q.dim() != t.dim() {
        return Err(Error::DimensionMismatch {
            expected: q.dim(),
            actual: t.dim(),
        });
    }
    Ok(dot(&q.0, &t.0))
}

/// Table row for a token.
pub fn bucket(token: &str, buckets: usize) -> usize {
    (fnv1a(token.as_bytes()) % buckets as u64) as usize
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EncoderConfig {
    pub buckets: usize,
    pub dim: usize,
    pub normalize: bool,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            buckets: DEFAULT_BUCKETS,
            dim: DEFAULT_DIM,
            normalize: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderModel {
    buckets: usize,
    dim: usize,
    normalize: bool,
    /// `buckets x dim`, row-major.
    table: Vec<f32>,
    /// `dim x dim`, row-major; output `i` is `sum_j projection[i][j] * pooled[j] + bias[i]`.
    projection: Vec<f32>,
    bias: Vec<f32>,
}

/// Intermediate values of one forward pass, kept for backpropagation.
struct Forward {
    rows: Vec<usize>,
    pooled: Vec<f64>,
    out: Vec<f64>,
    norm: f64,
}

impl EncoderModel {
    /// Uniform `[-0.05, 0.05]` table, identity projection, zero bias.
    pub fn new(config: EncoderConfig, seed: u64) -> Self {
        assert!(config.buckets > 0 && config.dim > 0, "buckets and dim must be positive");
        let mut rng = seed::rng(seed);
        let table = (0..config.buckets * config.dim)
            .map(|_| rng.gen_range(-INIT_SCALE..=INIT_SCALE))
            .collect();
        let mut projection = vec![0.0; config.dim * config.dim];
        for i in 0..config.dim {
            projection[i * config.dim + i] = 1.0;
        }
        EncoderModel {
            buckets: config.buckets,
            dim: config.dim,
            normalize: config.normalize,
            table,
            projection,
            bias: vec![0.0; config.dim],
        }
    }

    pub fn zeros(config: EncoderConfig) -> Self {
        EncoderModel {
            buckets: config.buckets,
            dim: config.dim,
            normalize: config.normalize,
            table: vec![0.0; config.buckets * config.dim],
            projection: vec![0.0; config.dim * config.dim],
            bias: vec![0.0; config.dim],
        }
    }

    pub fn config(&self) -> EncoderConfig {
        EncoderConfig {
            buckets: self.buckets,
            dim: self.dim,
            normalize: self.normalize,
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn buckets(&self) -> usize {
        self.buckets
    }

    pub fn normalize(&self) -> bool {
        self.normalize
    }

    pub fn table(&self) -> &[f32] {
        &self.table
    }

    pub fn table_mut(&mut self) -> &mut [f32] {
        &mut self.table
    }

    pub fn row(&self, bucket: usize) -> &[f32] {
        &self.table[bucket * self.dim..(bucket + 1) * self.dim]
    }

    pub fn projection(&self) -> &[f32] {
        &self.projection
    }

    pub fn projection_mut(&mut self) -> &mut [f32] {
        &mut self.projection
    }

    pub fn bias(&self) -> &[f32] {
        &self.bias
    }

    pub fn bias_mut(&mut self) -> &mut [f32] {
        &mut self.bias
    }

    pub fn encode(&self, seq: &TokenSequence) -> EmbeddingVector {
        EmbeddingVector(self.forward(seq).out.iter().map(|&v| v as f32).collect())
    }

    pub fn encode_text(&self, text: &str) -> EmbeddingVector {
        self.encode(&tokenize(text))
    }

    /// Encodes every triplet of the store, in id order.
    pub fn encode_store(&self, store: &KgStore) -> Vec<EmbeddingVector> {
        store
            .triplets()
            .par_iter()
            .map(|t| self.encode(&verbalize_triplet(t)))
            .collect()
    }

    fn forward(&self, seq: &TokenSequence) -> Forward {
        let d = self.dim;
        let rows: Vec<usize> = seq.iter().map(|tok| bucket(tok, self.buckets)).collect();
        let mut pooled = vec![0.0f64; d];
        if !rows.is_empty() {
            for &r in &rows {
                for (p, &v) in pooled.iter_mut().zip(self.row(r)) {
                    *p += f64::from(v);
                }
            }
            let inv = 1.0 / rows.len() as f64;
            pooled.iter_mut().for_each(|p| *p *= inv);
        }
        let mut out: Vec<f64> = (0..d)
            .map(|i| {
                let w = &self.projection[i * d..(i + 1) * d];
                let mut acc = f64::from(self.bias[i]);
                for (wij, pj) in w.iter().zip(&pooled) {
                    acc += f64::from(*wij) * pj;
                }
                acc
            })
            .collect();
        let norm = out.iter().map(|v| v * v).sum::<f64>().sqrt();
        if self.normalize && norm > 0.0 {
            out.iter_mut().for_each(|v| *v /= norm);
        }
        Forward {
            rows,
            pooled,
            out,
            norm,
        }
    }

    /// Accumulates the gradient of a scalar loss, given `d loss / d output`,
    /// into `grads`.
    fn backward(&self, fwd: &Forward, d_out: &[f64], grads: &mut EncoderGradients) {
        let d = self.dim;
        let d_pre: Vec<f64> = if self.normalize {
            if fwd.norm > 0.0 {
                let along: f64 = fwd.out.iter().zip(d_out).map(|(o, g)| o * g).sum();
                fwd.out
                    .iter()
                    .zip(d_out)
                    .map(|(o, g)| (g - o * along) / fwd.norm)
                    .collect()
            } else {
                vec![0.0; d]
            }
        } else {
            d_out.to_vec()
        };
        let mut d_pooled = vec![0.0f64; d];
        for i in 0..d {
            let gi = d_pre[i];
            grads.bias[i] += gi;
            let prow = &self.projection[i * d..(i + 1) * d];
            let grow = &mut grads.projection[i * d..(i + 1) * d];
            for j in 0..d {
                grow[j] += gi * fwd.pooled[j];
                d_pooled[j] += f64::from(prow[j]) * gi;
            }
        }
        if fwd.rows.is_empty() {
            return;
        }
        let inv = 1.0 / fwd.rows.len() as f64;
        for &r in &fwd.rows {
            let row = grads.rows.entry(r).or_insert_with(|| vec![0.0; d]);
            for (g, dp) in row.iter_mut().zip(&d_pooled) {
                *g += dp * inv;
            }
        }
    }

    /// Plain SGD step: `param -= lr * grad`.
    pub fn apply_gradients(&mut self, grads: &EncoderGradients, lr: f64) {
        let d = self.dim;
        for (&r, g) in &grads.rows {
            for (p, gj) in self.table[r * d..(r + 1) * d].iter_mut().zip(g) {
                *p = (f64::from(*p) - lr * gj) as f32;
            }
        }
        for (p, g) in self.projection.iter_mut().zip(&grads.projection) {
            *p = (f64::from(*p) - lr * g) as f32;
        }
        for (p, g) in self.bias.iter_mut().zip(&grads.bias) {
            *p = (f64::from(*p) - lr * g) as f32;
        }
    }

    pub fn write_snapshot<W: Write>(&self, mut w: W) -> io::Result<()> {
        w.write_all(SNAPSHOT_MAGIC)?;
        w.write_u32::<LittleEndian>(SNAPSHOT_VERSION)?;
        w.write_u32::<LittleEndian>(self.buckets as u32)?;
        w.write_u32::<LittleEndian>(self.dim as u32)?;
        w.write_u8(u8::from(self.normalize))?;
        for v in self.table.iter().chain(&self.projection).chain(&self.bias) {
            w.write_f32::<LittleEndian>(*v)?;
        }
        Ok(())
    }

    pub fn read_snapshot<R: Read>(mut r: R) -> Result<Self> {
        let bad = |e: io::Error| Error::Snapshot(format!("encoder snapshot truncated: {e}"));
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic).map_err(bad)?;
        if &magic != SNAPSHOT_MAGIC {
            return Err(Error::Snapshot("not an encoder snapshot (bad magic)".into()));
        }
        let version = r.read_u32::<LittleEndian>().map_err(bad)?;
        if version != SNAPSHOT_VERSION {
            return Err(Error::Snapshot(format!("unsupported encoder snapshot version {version}")));
        }
        let buckets = r.read_u32::<LittleEndian>().map_err(bad)? as usize;
        let dim = r.read_u32::<LittleEndian>().map_err(bad)? as usize;
        let normalize = match r.read_u8().map_err(bad)? {
            0 => false,
            1 => true,
            x => return Err(Error::Snapshot(format!("bad normalize flag {x}"))),
        };
        if buckets == 0 || dim == 0 {
            return Err(Error::Snapshot("zero buckets or dimension".into()));
        }
        let mut read = |n: usize| -> Result<Vec<f32>> {
            let mut v = vec![0.0f32; n];
            r.read_f32_into::<LittleEndian>(&mut v).map_err(bad)?;
            if v.iter().any(|x| !x.is_finite()) {
                return Err(Error::Snapshot("non-finite parameter".into()));
            }
            Ok(v)
        };
        let table = read(buckets * dim)?;
        let projection = read(dim * dim)?;
        let bias = read(dim)?;
        let mut rest = [0u8; 1];
        if r.read(&mut rest).map_err(bad)? != 0 {
            return Err(Error::Snapshot("trailing bytes after encoder snapshot".into()));
        }
        Ok(EncoderModel {
            buckets,
            dim,
            normalize,
            table,
            projection,
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

    /// Hash of the snapshot bytes. Indexes record it to detect stale embeddings.
    pub fn fingerprint(&self) -> u64 {
        let mut h = HashingWriter::default();
        self.write_snapshot(BufWriter::with_capacity(1 << 16, &mut h))
            .expect("hashing never fails");
        h.finish()
    }
}

/// A batch of `(query tokens, positive triplet id)` pairs. Every other pair's
/// positive serves as a negative for each query.
#[derive(Debug, Clone, Default)]
pub struct TrainingBatch {
    pub pairs: Vec<(TokenSequence, usize)>,
}

/// Gradients in parameter shapes. Only table rows touched by the batch are present.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderGradients {
    pub rows: BTreeMap<usize, Vec<f64>>,
    pub projection: Vec<f64>,
    pub bias: Vec<f64>,
}

impl EncoderGradients {
    fn zeros(dim: usize) -> Self {
        EncoderGradients {
            rows: BTreeMap::new(),
            projection: vec![0.0; dim * dim],
            bias: vec![0.0; dim],
        }
    }
}

fn check_batch(batch: &TrainingBatch, store: &KgStore) -> Result<()> {
    if batch.pairs.is_empty() {
        return Err(Error::InvalidArgument("training batch is empty".into()));
    }
    for &(_, id) in &batch.pairs {
        store.get(id)?;
    }
    Ok(())
}

/// Per-row log-softmax terms of the in-batch objective.
struct InBatch {
    queries: Vec<Forward>,
    positives: Vec<Forward>,
    /// `probs[i][j]` = softmax over `j` of `q_i . t_j`.
    probs: Vec<Vec<f64>>,
    loss: f64,
}

fn in_batch(model: &EncoderModel, batch: &TrainingBatch, store: &KgStore) -> Result<InBatch> {
    check_batch(batch, store)?;
    let m = batch.pairs.len();
    let queries: Vec<Forward> = batch.pairs.iter().map(|(q, _)| model.forward(q)).collect();
    let positives: Vec<Forward> = batch
        .pairs
        .iter()
        .map(|&(_, id)| Ok(model.forward(&verbalize_triplet(store.get(id)?))))
        .collect::<Result<_>>()?;
    let mut probs = Vec::with_capacity(m);
    let mut loss = 0.0;
    for (i, q) in queries.iter().enumerate() {
        let scores: Vec<f64> = positives
            .iter()
            .map(|t| q.out.iter().zip(&t.out).map(|(a, b)| a * b).sum())
            .collect();
        let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
        let z: f64 = exps.iter().sum();
        loss += max + z.ln() - scores[i];
        probs.push(exps.iter().map(|e| e / z).collect());
    }
    Ok(InBatch {
        queries,
        positives,
        probs,
        loss: loss / m as f64,
    })
}

/// Mean over the batch of `-log softmax_j(q_i . t_j)[i]`.
pub fn contrastive_loss(model: &EncoderModel, batch: &TrainingBatch, store: &KgStore) -> Result<f64> {
    Ok(in_batch(model, batch, store)?.loss)
}

/// Loss and its exact gradients with respect to every parameter group.
pub fn loss_and_gradients(
    model: &EncoderModel,
    batch: &TrainingBatch,
    store: &KgStore,
) -> Result<(f64, EncoderGradients)> {
    let fwd = in_batch(model, batch, store)?;
    let m = batch.pairs.len();
    let d = model.dim;
    let inv_m = 1.0 / m as f64;
    let mut grads = EncoderGradients::zeros(d);
    let mut d_pos = vec![vec![0.0f64; d]; m];
    for i in 0..m {
        let mut d_query = vec![0.0f64; d];
        for j in 0..m {
            let g = (fwd.probs[i][j] - if i == j { 1.0 } else { 0.0 }) * inv_m;
            for k in 0..d {
                d_query[k] += g * fwd.positives[j].out[k];
                d_pos[j][k] += g * fwd.queries[i].out[k];
            }
        }
        model.backward(&fwd.queries[i], &d_query, &mut grads);
    }
    for (t, g) in fwd.positives.iter().zip(&d_pos) {
        model.backward(t, g, &mut grads);
    }
    Ok((fwd.loss, grads))
}

pub fn loss_gradients(model: &EncoderModel, batch: &TrainingBatch, store: &KgStore) -> Result<EncoderGradients> {
    loss_and_gradients(model, batch, store).map(|(_, g)| g)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 30,
            batch_size: 64,
            learning_rate: 0.05,
            seed: 0,
        }
    }
}

/// A trained model with the mean training loss of each epoch.
#[derive(Debug, Clone)]
pub struct Trained<M> {
    pub model: M,
    pub epoch_losses: Vec<f64>,
}

pub(crate) fn validate_training(queries: &[Query], store: &KgStore, lr: f64, batch_size: usize) -> Result<()> {
    if queries.is_empty() {
        return Err(Error::InvalidArgument("no training queries".into()));
    }
    if !(lr >= 0.0 && lr.is_finite()) {
        return Err(Error::InvalidArgument(format!("learning rate must be finite and non-negative, got {lr}")));
    }
    if batch_size == 0 {
        return Err(Error::InvalidArgument("batch size must be positive".into()));
    }
    for q in queries {
        if q.gold.is_empty() {
            return Err(Error::InvalidArgument(format!("query {} has no gold triplet", q.id)));
        }
        for &g in &q.gold {
            store.get(g)?;
        }
    }
    Ok(())
}

/// Trains with in-batch negatives and plain SGD. Each epoch shuffles the
/// queries and samples one gold per query.
pub fn train_retriever(
    mut model: EncoderModel,
    queries: &[Query],
    store: &KgStore,
    config: &TrainConfig,
) -> Result<Trained<EncoderModel>> {
    validate_training(queries, store, config.learning_rate, config.batch_size)?;
    let mut rng = seed::rng(config.seed);
    let tokens: Vec<TokenSequence> = queries.iter().map(|q| tokenize(&q.text)).collect();
    let mut order: Vec<usize> = (0..queries.len()).collect();
    let mut epoch_losses = Vec::with_capacity(config.epochs);
    for _ in 0..config.epochs {
        order.shuffle(&mut rng);
        let positives: Vec<usize> = order
            .iter()
            .map(|&qi| {
                let gold = &queries[qi].gold;
                gold[rng.gen_range(0..gold.len())]
            })
            .collect();
        let mut total = 0.0;
        for (chunk, pos) in order.chunks(config.batch_size).zip(positives.chunks(config.batch_size)) {
            let batch = TrainingBatch {
                pairs: chunk.iter().zip(pos).map(|(&qi, &p)| (tokens[qi].clone(), p)).collect(),
            };
            let (loss, grads) = loss_and_gradients(&model, &batch, store)?;
            total += loss * chunk.len() as f64;
            model.apply_gradients(&grads, config.learning_rate);
        }
        epoch_losses.push(total / queries.len() as f64);
    }
    Ok(Trained { model, epoch_losses })
}
