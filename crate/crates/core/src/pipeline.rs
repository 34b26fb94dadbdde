//! End-to-end run: synthesize, train the retriever, index, train the
//! reranker, retrieve and rerank the test split, and report both rankings.
//!
//! Every random stage draws from `seed::sub_seed(root, <stage>)`, so any
//! stage can be rerun on its own and reproduce the same bytes.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use rayon::prelude::*;

use crate::encoder::{train_retriever, EncoderConfig, EncoderModel, TrainConfig};
use crate::error::{Error, Result};
use crate::evaluator::{evaluate, EvalOptions, EvalReport};
use crate::index::{HnswParams, RankedList};
use crate::kg_store::KgStore;
use crate::query::{write_jsonl, Query, QueryResult};
use crate::reranker::{rerank, train_reranker, RerankerConfig, RerankerModel, RerankerTrainConfig, DEFAULT_TOP_K};
use crate::retriever::{Backend, RetrievalConfig, RetrieverBundle, DEFAULT_K};
use crate::seed::sub_seed;
use crate::synth::{generate, SynthConfig};

/// Stage names double as sub-seed labels.
pub mod stage {
    pub const ENCODER_INIT: &str = "encoder-init";
    pub const TRAIN_RETRIEVER: &str = "train-retriever";
    pub const BUILD_INDEX: &str = "build-index";
    pub const RERANKER_INIT: &str = "reranker-init";
    pub const TRAIN_RERANKER: &str = "train-reranker";
}

pub const MODEL_FILE: &str = "model.bin";
pub const INDEX_FILE: &str = "index.bin";
pub const RERANKER_FILE: &str = "reranker.bin";
pub const RETRIEVER_RESULTS_FILE: &str = "results_retriever.jsonl";
pub const RERANKED_RESULTS_FILE: &str = "results_reranked.jsonl";
pub const RETRIEVER_REPORT_FILE: &str = "report_retriever.json";
pub const RERANKED_REPORT_FILE: &str = "report_reranked.json";
pub const DATA_DIR: &str = "data";

#[derive(Debug, Clone, PartialEq)]
pub struct PipelineConfig {
    pub seed: u64,
    pub synth: SynthConfig,
    pub encoder: EncoderConfig,
    pub train: TrainConfig,
    pub hnsw: HnswParams,
    pub reranker: RerankerConfig,
    pub reranker_train: RerankerTrainConfig,
    pub retrieval: RetrievalConfig,
    pub top_k_rerank: usize,
    pub eval: EvalOptions,
}

/// The benchmark profile. Component defaults are overridden where they do
/// not train on the synthetic data: the encoder needs small batches and a
/// small step, and the reranker needs more epochs over the whole graph.
impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            seed: 42,
            synth: SynthConfig::default(),
            encoder: EncoderConfig::default(),
            train: TrainConfig {
                batch_size: 8,
                learning_rate: 0.005,
                ..TrainConfig::default()
            },
            hnsw: HnswParams::default(),
            reranker: RerankerConfig::default(),
            reranker_train: RerankerTrainConfig {
                epochs: 100,
                learning_rate: 0.2,
                subset_fraction: 1.0,
                ..RerankerTrainConfig::default()
            },
            retrieval: RetrievalConfig {
                k: DEFAULT_K,
                backend: Backend::Hnsw,
                ef_search: None,
            },
            top_k_rerank: DEFAULT_TOP_K,
            eval: EvalOptions::default(),
        }
        .with_root_seed(42)
    }
}

impl PipelineConfig {
    /// Seeds of the individual stages derived from the root seed.
    pub fn with_root_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self.synth.seed = seed;
        self.train.seed = sub_seed(seed, stage::TRAIN_RETRIEVER);
        self.reranker_train.seed = sub_seed(seed, stage::TRAIN_RERANKER);
        self
    }

    pub fn encoder_seed(&self) -> u64 {
        sub_seed(self.seed, stage::ENCODER_INIT)
    }

    pub fn index_seed(&self) -> u64 {
        sub_seed(self.seed, stage::BUILD_INDEX)
    }

    pub fn reranker_seed(&self) -> u64 {
        sub_seed(self.seed, stage::RERANKER_INIT)
    }
}

#[derive(Debug, Clone)]
pub struct StageTiming {
    pub stage: &'static str,
    pub elapsed: Duration,
    /// Queries processed, for throughput lines.
    pub queries: Option<usize>,
}

impl StageTiming {
    pub fn queries_per_second(&self) -> Option<f64> {
        self.queries.map(|n| n as f64 / self.elapsed.as_secs_f64().max(1e-9))
    }
}

#[derive(Debug, Clone)]
pub struct RunOutput {
    pub retriever_report: EvalReport,
    pub reranked_report: EvalReport,
    pub files: Vec<PathBuf>,
    pub timings: Vec<StageTiming>,
}

/// Retrieves every query in parallel, keeping input order.
pub fn retrieve_all(bundle: &RetrieverBundle, queries: &[Query], config: &RetrievalConfig) -> Result<Vec<(String, RankedList)>> {
    queries
        .par_iter()
        .map(|q| Ok((q.id.clone(), bundle.retrieve(&q.text, config)?)))
        .collect()
}

pub fn rerank_all(
    model: &RerankerModel,
    queries: &[Query],
    retrieved: &[(String, RankedList)],
    store: &KgStore,
    top_k: usize,
) -> Result<Vec<(String, RankedList)>> {
    if queries.len() != retrieved.len() {
        return Err(Error::InvalidArgument("query and result counts differ".into()));
    }
    queries
        .par_iter()
        .zip(retrieved)
        .map(|(q, (id, list))| {
            if &q.id != id {
                return Err(Error::IdMismatch { missing: vec![q.id.clone()] });
            }
            Ok((id.clone(), rerank(model, &q.text, list, store, top_k)?))
        })
        .collect()
}

pub fn to_results(ranked: &[(String, RankedList)]) -> Vec<QueryResult> {
    ranked.iter().map(|(id, l)| QueryResult::new(id.clone(), l)).collect()
}

fn write_report(path: &Path, report: &EvalReport) -> Result<()> {
    fs::write(path, report.to_json()).map_err(|e| Error::io(path, e))
}

fn timed<T>(timings: &mut Vec<StageTiming>, stage: &'static str, queries: Option<usize>, f: impl FnOnce() -> Result<T>) -> Result<T> {
    let start = Instant::now();
    let out = f()?;
    timings.push(StageTiming {
        stage,
        elapsed: start.elapsed(),
        queries,
    });
    Ok(out)
}

/// Runs every stage and writes all artifacts under `out_dir`.
pub fn run_all(config: &PipelineConfig, out_dir: impl AsRef<Path>) -> Result<RunOutput> {
    let out = out_dir.as_ref();
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let mut timings = Vec::new();
    let mut files = Vec::new();

    let data = timed(&mut timings, "synth-gen", None, || generate(&config.synth))?;
    files.extend(data.write(out.join(DATA_DIR))?);

    let model = timed(&mut timings, "train-retriever", Some(data.train.len()), || {
        let init = EncoderModel::new(config.encoder, config.encoder_seed());
        train_retriever(init, &data.train, &data.store, &config.train)
    })?
    .model;
    let model_path = out.join(MODEL_FILE);
    model.save(&model_path)?;
    files.push(model_path);

    let bundle = timed(&mut timings, "build-index", None, || {
        let bundle = RetrieverBundle::new(model, data.store.clone())?;
        let index = bundle.build_hnsw(config.hnsw, config.index_seed())?;
        let index_path = out.join(INDEX_FILE);
        index.save(&index_path)?;
        files.push(index_path);
        bundle.with_hnsw(index)
    })?;

    let reranker = timed(&mut timings, "train-reranker", Some(data.train.len()), || {
        let init = RerankerModel::new(config.reranker, config.reranker_seed());
        train_reranker(init, &data.train, &bundle, &config.reranker_train)
    })?
    .trained
    .model;
    let reranker_path = out.join(RERANKER_FILE);
    reranker.save(&reranker_path)?;
    files.push(reranker_path);

    let retrieved = timed(&mut timings, "retrieve", Some(data.test.len()), || {
        retrieve_all(&bundle, &data.test, &config.retrieval)
    })?;
    let reranked = timed(&mut timings, "rerank", Some(data.test.len()), || {
        rerank_all(&reranker, &data.test, &retrieved, &data.store, config.top_k_rerank)
    })?;

    let mut reports = Vec::new();
    for (ranked, results_name, report_name) in [
        (&retrieved, RETRIEVER_RESULTS_FILE, RETRIEVER_REPORT_FILE),
        (&reranked, RERANKED_RESULTS_FILE, RERANKED_REPORT_FILE),
    ] {
        let results_path = out.join(results_name);
        write_jsonl(&results_path, &to_results(ranked))?;
        let report = evaluate(ranked, &data.test, Some(&data.store), &config.eval)?;
        let report_path = out.join(report_name);
        write_report(&report_path, &report)?;
        files.extend([results_path, report_path]);
        reports.push(report);
    }
    let reranked_report = reports.pop().expect("two reports");
    let retriever_report = reports.pop().expect("two reports");
    Ok(RunOutput {
        retriever_report,
        reranked_report,
        files,
        timings,
    })
}
