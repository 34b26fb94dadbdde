//! `difar`: generate data, train, index, retrieve, rerank and evaluate.
//!
//! Exit codes: 0 success, 2 usage or configuration error, 3 data or format
//! error, 4 model/index consistency error.

mod config;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Parser, Subcommand};
use difar_core::encoder::train_retriever;
use difar_core::pipeline::{self, retrieve_all, rerank_all, run_all, to_results, PipelineConfig};
use difar_core::query::{read_jsonl, write_jsonl};
use difar_core::reranker::{mine_negatives, train_reranker};
use difar_core::seed::sub_seed;
use difar_core::{
    evaluate, Backend, EncoderModel, EvalReport, HnswIndex, KgStore, Query, QueryResult, RankedList, RerankerModel,
    RetrieverBundle,
};
use thiserror::Error;

use crate::config::{render, ConfigError, RunConfig};

#[derive(Parser, Debug)]
#[command(name = "difar", version, about = "Direct fact retrieval over knowledge graphs")]
struct Cli {
    /// Flat `key = value` config file; flags override it.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Root seed; every stage derives its own seed from it.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Extra `key=value` assignment (repeatable), applied after --config.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Number of triplets to retrieve per query.
    #[arg(long, global = true)]
    k: Option<usize>,
    /// Size of the block the reranker re-scores.
    #[arg(long, global = true)]
    top_k_rerank: Option<usize>,
    #[arg(long, global = true, value_parser = ["exact", "hnsw"])]
    backend: Option<String>,
    /// Beam width for HNSW search (defaults to the value stored in the index).
    #[arg(long, global = true)]
    ef_search: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write a synthetic knowledge graph and train/valid/test queries.
    SynthGen {
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Train the bi-encoder on a query file.
    TrainRetriever {
        #[arg(long)]
        kg: PathBuf,
        #[arg(long)]
        queries: PathBuf,
        #[arg(long)]
        model_out: PathBuf,
    },
    /// Embed the graph with a trained encoder and build the HNSW index.
    BuildIndex {
        #[arg(long)]
        kg: PathBuf,
        #[arg(long)]
        model_in: PathBuf,
        #[arg(long)]
        index_out: PathBuf,
    },
    /// Retrieve the top-k triplets for every query.
    Retrieve {
        #[arg(long)]
        kg: PathBuf,
        #[arg(long)]
        model_in: PathBuf,
        /// Required for the hnsw backend.
        #[arg(long)]
        index_in: Option<PathBuf>,
        #[arg(long)]
        queries: PathBuf,
        #[arg(long)]
        results_out: PathBuf,
    },
    /// Write hard negatives for every query as JSONL.
    MineNegatives {
        #[arg(long)]
        kg: PathBuf,
        #[arg(long)]
        model_in: PathBuf,
        #[arg(long)]
        queries: PathBuf,
        #[arg(long)]
        negatives_out: PathBuf,
    },
    /// Train the reranker with negatives mined by a trained encoder.
    TrainReranker {
        #[arg(long)]
        kg: PathBuf,
        #[arg(long)]
        model_in: PathBuf,
        #[arg(long)]
        queries: PathBuf,
        #[arg(long)]
        reranker_out: PathBuf,
    },
    /// Re-score the top of each retrieved list.
    Rerank {
        #[arg(long)]
        kg: PathBuf,
        #[arg(long)]
        reranker_in: PathBuf,
        #[arg(long)]
        queries: PathBuf,
        #[arg(long)]
        results_in: PathBuf,
        #[arg(long)]
        results_out: PathBuf,
    },
    /// Score a results file against gold annotations.
    Eval {
        /// Needed for entity containment when queries carry gold entities.
        #[arg(long)]
        kg: Option<PathBuf>,
        #[arg(long)]
        queries: PathBuf,
        #[arg(long)]
        results_in: PathBuf,
        /// Where to write the report; printed to stdout when absent.
        #[arg(long)]
        report_out: Option<PathBuf>,
    },
    /// Run every stage on synthetic data and report both rankings.
    RunAll {
        #[arg(long)]
        out_dir: PathBuf,
    },
}

impl Command {
    fn stage(&self) -> &'static str {
        match self {
            Command::SynthGen { .. } => "synth-gen",
            Command::TrainRetriever { .. } => "train-retriever",
            Command::BuildIndex { .. } => "build-index",
            Command::Retrieve { .. } => "retrieve",
            Command::MineNegatives { .. } => "mine-negatives",
            Command::TrainReranker { .. } => "train-reranker",
            Command::Rerank { .. } => "rerank",
            Command::Eval { .. } => "eval",
            Command::RunAll { .. } => "run-all",
        }
    }
}

#[derive(Debug, Error)]
enum CliError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Core(#[from] difar_core::Error),
}

impl CliError {
    fn exit_code(&self) -> u8 {
        use difar_core::Error as E;
        match self {
            CliError::Config(_) | CliError::Usage(_) => 2,
            CliError::Core(E::StaleIndex { .. }) => 4,
            CliError::Core(E::InvalidArgument(_) | E::Infeasible(_)) => 2,
            CliError::Core(_) => 3,
        }
    }
}

type CliResult<T> = Result<T, CliError>;

fn resolve_config(cli: &Cli) -> CliResult<PipelineConfig> {
    let mut rc = RunConfig::default();
    if let Some(path) = &cli.config {
        rc.push_file(path)?;
    }
    for item in &cli.set {
        let (k, v) = item
            .split_once('=')
            .ok_or_else(|| CliError::Usage(format!("--set expects KEY=VALUE, got {item:?}")))?;
        rc.push(k.trim(), v.trim());
    }
    if let Some(seed) = cli.seed {
        rc.push("seed", seed.to_string());
    }
    if let Some(k) = cli.k {
        rc.push("retrieval.k", k.to_string());
    }
    if let Some(k) = cli.top_k_rerank {
        rc.push("rerank.top_k", k.to_string());
    }
    if let Some(b) = &cli.backend {
        rc.push("retrieval.backend", b.clone());
    }
    if let Some(ef) = cli.ef_search {
        rc.push("retrieval.ef_search", ef.to_string());
    }
    Ok(rc.resolve()?)
}

fn timing(stage: &str, elapsed: std::time::Duration, queries: Option<usize>) {
    let secs = elapsed.as_secs_f64();
    match queries {
        Some(n) => eprintln!("[timing] {stage}: {secs:.3}s, {n} queries, {:.1} queries/s", n as f64 / secs.max(1e-9)),
        None => eprintln!("[timing] {stage}: {secs:.3}s"),
    }
}

fn timed<T>(stage: &str, queries: Option<usize>, f: impl FnOnce() -> CliResult<T>) -> CliResult<T> {
    let start = Instant::now();
    let out = f()?;
    timing(stage, start.elapsed(), queries);
    Ok(out)
}

fn load_queries(path: &Path) -> CliResult<Vec<Query>> {
    Ok(read_jsonl(path)?)
}

fn load_results(path: &Path) -> CliResult<Vec<(String, RankedList)>> {
    let rows: Vec<QueryResult> = read_jsonl(path)?;
    Ok(rows.into_iter().map(|r| (r.id.clone(), r.to_ranked_list())).collect())
}

fn load_bundle(kg: &Path, model: &Path) -> CliResult<RetrieverBundle> {
    Ok(RetrieverBundle::new(EncoderModel::load(model)?, KgStore::load(kg)?)?)
}

fn write_report(report: &EvalReport, path: Option<&Path>) -> CliResult<()> {
    match path {
        Some(p) => fs::write(p, report.to_json()).map_err(|source| {
            difar_core::Error::Io {
                path: p.to_path_buf(),
                source,
            }
            .into()
        }),
        None => {
            print!("{}", report.to_json());
            Ok(())
        }
    }
}

fn summary(label: &str, r: &EvalReport) -> String {
    let hits: Vec<String> = r.hits.iter().map(|(k, v)| format!("hits@{k}={v:.4}")).collect();
    format!("{label}: n={} mrr={:.4} {}", r.n, r.mrr, hits.join(" "))
}

fn run(cli: &Cli, cfg: &PipelineConfig) -> CliResult<()> {
    match &cli.command {
        Command::SynthGen { out_dir } => {
            let data = timed("synth-gen", None, || Ok(difar_core::generate(&cfg.synth)?))?;
            for path in data.write(out_dir)? {
                println!("wrote {}", path.display());
            }
        }
        Command::TrainRetriever { kg, queries, model_out } => {
            let store = KgStore::load(kg)?;
            let queries = load_queries(queries)?;
            let trained = timed("train-retriever", Some(queries.len()), || {
                let init = EncoderModel::new(cfg.encoder, cfg.encoder_seed());
                Ok(train_retriever(init, &queries, &store, &cfg.train)?)
            })?;
            if let Some(last) = trained.epoch_losses.last() {
                println!("final epoch loss {last:.6}");
            }
            trained.model.save(model_out)?;
        }
        Command::BuildIndex { kg, model_in, index_out } => {
            let bundle = load_bundle(kg, model_in)?;
            let index = timed("build-index", None, || Ok(bundle.build_hnsw(cfg.hnsw, cfg.index_seed())?))?;
            index.save(index_out)?;
        }
        Command::Retrieve {
            kg,
            model_in,
            index_in,
            queries,
            results_out,
        } => {
            let mut bundle = load_bundle(kg, model_in)?;
            match (cfg.retrieval.backend, index_in) {
                (Backend::Hnsw, None) => return Err(CliError::Usage("the hnsw backend needs --index-in".into())),
                (_, Some(path)) => bundle = bundle.with_hnsw(HnswIndex::load(path)?)?,
                (Backend::Exact, None) => {}
            }
            let queries = load_queries(queries)?;
            let ranked = timed("retrieve", Some(queries.len()), || Ok(retrieve_all(&bundle, &queries, &cfg.retrieval)?))?;
            write_jsonl(results_out, &to_results(&ranked))?;
        }
        Command::MineNegatives {
            kg,
            model_in,
            queries,
            negatives_out,
        } => {
            let bundle = load_bundle(kg, model_in)?;
            let queries = load_queries(queries)?;
            let rt = &cfg.reranker_train;
            let mined = timed("mine-negatives", Some(queries.len()), || {
                Ok(mine_negatives(&bundle, &queries, rt.subset_fraction, rt.top_k, sub_seed(rt.seed, "mine-0"))?)
            })?;
            let rows: Vec<serde_json::Value> = queries
                .iter()
                .zip(&mined.per_query)
                .map(|(q, negs)| serde_json::json!({ "id": q.id, "negatives": negs }))
                .collect();
            write_jsonl(negatives_out, &rows)?;
        }
        Command::TrainReranker {
            kg,
            model_in,
            queries,
            reranker_out,
        } => {
            let bundle = load_bundle(kg, model_in)?;
            let queries = load_queries(queries)?;
            let training = timed("train-reranker", Some(queries.len()), || {
                let init = RerankerModel::new(cfg.reranker, cfg.reranker_seed());
                Ok(train_reranker(init, &queries, &bundle, &cfg.reranker_train)?)
            })?;
            if let Some(last) = training.trained.epoch_losses.last() {
                println!("final epoch loss {last:.6}");
            }
            training.trained.model.save(reranker_out)?;
        }
        Command::Rerank {
            kg,
            reranker_in,
            queries,
            results_in,
            results_out,
        } => {
            let store = KgStore::load(kg)?;
            let model = RerankerModel::load(reranker_in)?;
            let queries = load_queries(queries)?;
            let retrieved = load_results(results_in)?;
            let reranked = timed("rerank", Some(queries.len()), || {
                Ok(rerank_all(&model, &queries, &retrieved, &store, cfg.top_k_rerank)?)
            })?;
            write_jsonl(results_out, &to_results(&reranked))?;
        }
        Command::Eval {
            kg,
            queries,
            results_in,
            report_out,
        } => {
            let store = kg.as_deref().map(KgStore::load).transpose()?;
            let queries = load_queries(queries)?;
            let results = load_results(results_in)?;
            let report = timed("eval", Some(queries.len()), || {
                Ok(evaluate(&results, &queries, store.as_ref(), &cfg.eval)?)
            })?;
            eprintln!("{}", summary("eval", &report));
            write_report(&report, report_out.as_deref())?;
        }
        Command::RunAll { out_dir } => {
            let out = run_all(cfg, out_dir)?;
            for t in &out.timings {
                timing(t.stage, t.elapsed, t.queries);
            }
            println!("{}", summary("retriever", &out.retriever_report));
            println!("{}", summary("reranked", &out.reranked_report));
            println!(
                "reports: {} {}",
                out_dir.join(pipeline::RETRIEVER_REPORT_FILE).display(),
                out_dir.join(pipeline::RERANKED_REPORT_FILE).display()
            );
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let stage = cli.command.stage();
    let result = resolve_config(&cli).and_then(|cfg| {
        eprint!("# resolved config\n{}", render(&cfg));
        run(&cli, &cfg)
    });
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {stage}: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
