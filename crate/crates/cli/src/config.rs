//! Flat `key = value` run configuration layered over [`PipelineConfig`].
//!
//! A config file holds one assignment per line; `#` starts a comment.
//! Command-line flags are applied after the file, so they win. Unknown keys
//! are rejected so a typo cannot silently fall back to a default.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use difar_core::pipeline::PipelineConfig;
use difar_core::Backend;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("unknown config key {0:?}")]
    UnknownKey(String),
    #[error("bad value {value:?} for {key}: expected {expected}")]
    BadValue {
        key: String,
        value: String,
        expected: &'static str,
    },
    #[error("{path}:{line}: expected `key = value`")]
    Syntax { path: String, line: usize },
    #[error("cannot read config {path}: {source}")]
    Read {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

trait ConfigValue: Sized {
    const EXPECTED: &'static str;
    fn parse(s: &str) -> Option<Self>;
    fn show(&self) -> String;
}

impl ConfigValue for usize {
    const EXPECTED: &'static str = "a non-negative integer";
    fn parse(s: &str) -> Option<Self> {
        s.parse().ok()
    }
    fn show(&self) -> String {
        self.to_string()
    }
}

impl ConfigValue for u64 {
    const EXPECTED: &'static str = "a non-negative integer";
    fn parse(s: &str) -> Option<Self> {
        s.parse().ok()
    }
    fn show(&self) -> String {
        self.to_string()
    }
}

impl ConfigValue for f64 {
    const EXPECTED: &'static str = "a finite number";
    fn parse(s: &str) -> Option<Self> {
        s.parse().ok().filter(|v: &f64| v.is_finite())
    }
    fn show(&self) -> String {
        self.to_string()
    }
}

impl ConfigValue for bool {
    const EXPECTED: &'static str = "true or false";
    fn parse(s: &str) -> Option<Self> {
        s.parse().ok()
    }
    fn show(&self) -> String {
        self.to_string()
    }
}

impl ConfigValue for Backend {
    const EXPECTED: &'static str = "exact or hnsw";
    fn parse(s: &str) -> Option<Self> {
        s.parse().ok()
    }
    fn show(&self) -> String {
        self.to_string()
    }
}

/// `index` means "use the value stored in the index".
impl ConfigValue for Option<usize> {
    const EXPECTED: &'static str = "a positive integer or `index`";
    fn parse(s: &str) -> Option<Self> {
        match s {
            "index" => Some(None),
            _ => s.parse().ok().map(Some),
        }
    }
    fn show(&self) -> String {
        self.map_or_else(|| "index".to_string(), |v| v.to_string())
    }
}

/// Comma-separated list, possibly empty.
impl ConfigValue for Vec<usize> {
    const EXPECTED: &'static str = "a comma-separated list of integers";
    fn parse(s: &str) -> Option<Self> {
        if s.is_empty() {
            return Some(Vec::new());
        }
        s.split(',').map(|p| p.trim().parse().ok()).collect()
    }
    fn show(&self) -> String {
        self.iter().map(ToString::to_string).collect::<Vec<_>>().join(",")
    }
}

fn parsed<T: ConfigValue>(key: &str, value: &str) -> Result<T, ConfigError> {
    T::parse(value).ok_or_else(|| ConfigError::BadValue {
        key: key.to_string(),
        value: value.to_string(),
        expected: T::EXPECTED,
    })
}

macro_rules! config_keys {
    ($($key:literal => $($field:ident).+;)*) => {
        /// Every accepted key, in the order the resolved config is printed.
        pub const KEYS: &[&str] = &[$($key),*];

        fn set(cfg: &mut PipelineConfig, key: &str, value: &str) -> Result<(), ConfigError> {
            match key {
                $($key => cfg.$($field).+ = parsed(key, value)?,)*
                _ => return Err(ConfigError::UnknownKey(key.to_string())),
            }
            Ok(())
        }

        fn get(cfg: &PipelineConfig, key: &str) -> Option<String> {
            match key {
                $($key => Some(cfg.$($field).+.show()),)*
                _ => None,
            }
        }
    };
}

config_keys! {
    "seed" => seed;
    "synth.n_entities" => synth.n_entities;
    "synth.n_relations" => synth.n_relations;
    "synth.n_triplets" => synth.n_triplets;
    "synth.queries_per_triplet" => synth.queries_per_triplet;
    "synth.multi_hop_fraction" => synth.multi_hop_fraction;
    "synth.distractor_rate" => synth.distractor_rate;
    "encoder.buckets" => encoder.buckets;
    "encoder.dim" => encoder.dim;
    "encoder.normalize" => encoder.normalize;
    "train.epochs" => train.epochs;
    "train.batch_size" => train.batch_size;
    "train.learning_rate" => train.learning_rate;
    "hnsw.m" => hnsw.m;
    "hnsw.ef_construction" => hnsw.ef_construction;
    "hnsw.ef_search" => hnsw.ef_search;
    "reranker.buckets" => reranker.buckets;
    "reranker.dim" => reranker.dim;
    "reranker_train.epochs" => reranker_train.epochs;
    "reranker_train.refresh_interval" => reranker_train.refresh_interval;
    "reranker_train.negatives_per_query" => reranker_train.negatives_per_query;
    "reranker_train.batch_size" => reranker_train.batch_size;
    "reranker_train.learning_rate" => reranker_train.learning_rate;
    "reranker_train.top_k" => reranker_train.top_k;
    "reranker_train.subset_fraction" => reranker_train.subset_fraction;
    "retrieval.k" => retrieval.k;
    "retrieval.backend" => retrieval.backend;
    "retrieval.ef_search" => retrieval.ef_search;
    "rerank.top_k" => top_k_rerank;
    "eval.extra_hits" => eval.extra_hits;
    "eval.containment_k" => eval.containment_k;
    "eval.cutoff" => eval.cutoff;
}

/// Accumulates assignments; later ones override earlier ones.
#[derive(Debug, Clone, Default)]
pub struct RunConfig {
    assignments: Vec<(String, String)>,
}

impl RunConfig {
    pub fn push(&mut self, key: impl Into<String>, value: impl Into<String>) {
        self.assignments.push((key.into(), value.into()));
    }

    /// Parses `key = value` lines.
    pub fn push_text(&mut self, text: &str, origin: &str) -> Result<(), ConfigError> {
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| ConfigError::Syntax {
                path: origin.to_string(),
                line: n + 1,
            })?;
            self.push(k.trim(), v.trim());
        }
        Ok(())
    }

    pub fn push_file(&mut self, path: &Path) -> Result<(), ConfigError> {
        let text = fs::read_to_string(path).map_err(|source| ConfigError::Read {
            path: path.display().to_string(),
            source,
        })?;
        self.push_text(&text, &path.display().to_string())
    }

    /// Applies every assignment to the benchmark defaults, then fans the
    /// root seed out to the stage seeds.
    pub fn resolve(&self) -> Result<PipelineConfig, ConfigError> {
        let mut cfg = PipelineConfig::default();
        for (k, v) in &self.assignments {
            set(&mut cfg, k, v)?;
        }
        let seed = cfg.seed;
        Ok(cfg.with_root_seed(seed))
    }
}

/// The fully resolved configuration in config-file syntax.
pub fn render(cfg: &PipelineConfig) -> String {
    let mut out = String::new();
    for key in KEYS {
        let value = get(cfg, key).expect("listed key");
        writeln!(out, "{key} = {value}").expect("write to string");
    }
    out
}
