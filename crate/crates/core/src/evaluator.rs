//! Ranking metrics: reciprocal rank, Hits@K, hop strata, entity containment.
//!
//! All averages are per query. A query may list several gold triplets; both
//! metrics key on the first gold that appears.

use std::collections::{BTreeMap, HashMap, HashSet};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::index::RankedList;
use crate::kg_store::KgStore;
use crate::query::Query;

pub const MRR_CUTOFF: usize = 1000;
pub const DEFAULT_HITS: [usize; 2] = [1, 10];
pub const UNKNOWN_STRATUM: &str = "unknown";

fn check_gold(gold: &[usize]) -> Result<()> {
    if gold.is_empty() {
        return Err(Error::InvalidArgument("gold set is empty".into()));
    }
    Ok(())
}

/// `1 / rank` of the first gold id within the first `cutoff` entries, else 0.
pub fn reciprocal_rank(ranking: &RankedList, gold: &[usize], cutoff: usize) -> Result<f64> {
    check_gold(gold)?;
    Ok(ranking
        .iter()
        .take(cutoff)
        .position(|e| gold.contains(&e.id))
        .map_or(0.0, |p| 1.0 / (p + 1) as f64))
}

/// 1 if any gold id is among the first `k` entries.
pub fn hits_at_k(ranking: &RankedList, gold: &[usize], k: usize) -> Result<u8> {
    check_gold(gold)?;
    if k == 0 {
        return Err(Error::InvalidArgument("K must be at least 1".into()));
    }
    Ok(u8::from(ranking.iter().take(k).any(|e| gold.contains(&e.id))))
}

fn normalize_label(s: &str) -> String {
    s.trim().to_lowercase()
}

/// 1 if the head or tail of any of the first `k` triplets equals one of the
/// gold entity labels after trimming and case folding.
pub fn entity_containment(ranking: &RankedList, gold_entities: &[String], store: &KgStore, k: usize) -> Result<u8> {
    if gold_entities.is_empty() {
        return Err(Error::InvalidArgument("gold entity list is empty".into()));
    }
    if k == 0 {
        return Err(Error::InvalidArgument("containment K must be at least 1".into()));
    }
    let wanted: HashSet<String> = gold_entities.iter().map(|g| normalize_label(g)).collect();
    for e in ranking.iter().take(k) {
        let t = store.get(e.id)?;
        if wanted.contains(&normalize_label(&t.head)) || wanted.contains(&normalize_label(&t.tail)) {
            return Ok(1);
        }
    }
    Ok(0)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EvalOptions {
    /// Extra Hits@K depths on top of 1 and 10.
    pub extra_hits: Vec<usize>,
    pub containment_k: usize,
    pub cutoff: usize,
}

impl Default for EvalOptions {
    fn default() -> Self {
        EvalOptions {
            extra_hits: Vec::new(),
            containment_k: 1,
            cutoff: MRR_CUTOFF,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StratumReport {
    pub mrr: f64,
    pub hits: BTreeMap<usize, f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub entity_containment: Option<f64>,
    pub n: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub mrr: f64,
    pub hits: BTreeMap<usize, f64>,
    /// Keyed by hop count, or `"unknown"` for queries without one.
    pub strata: BTreeMap<String, StratumReport>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub entity_containment: Option<f64>,
    pub n: usize,
}

impl EvalReport {
    pub fn hits_at(&self, k: usize) -> Option<f64> {
        self.hits.get(&k).copied()
    }

    /// Pretty JSON with a trailing newline; key order is fixed.
    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report serializes");
        s.push('\n');
        s
    }
}

struct PerQuery {
    rr: f64,
    hits: Vec<u8>,
    containment: Option<u8>,
}

fn summarize(rows: &[&PerQuery], ks: &[usize]) -> StratumReport {
    let n = rows.len();
    let mean = |sum: f64, count: usize| if count == 0 { 0.0 } else { sum / count as f64 };
    let hits = ks
        .iter()
        .enumerate()
        .map(|(i, &k)| (k, mean(rows.iter().map(|r| f64::from(r.hits[i])).sum(), n)))
        .collect();
    let with_entities: Vec<u8> = rows.iter().filter_map(|r| r.containment).collect();
    StratumReport {
        mrr: mean(rows.iter().map(|r| r.rr).sum(), n),
        hits,
        entity_containment: (!with_entities.is_empty())
            .then(|| mean(with_entities.iter().map(|&c| f64::from(c)).sum(), with_entities.len())),
        n,
    }
}

/// Macro-averaged report over `results`, which must cover exactly the ids in
/// `queries`. `store` is needed only when some query carries gold entities.
pub fn evaluate(
    results: &[(String, RankedList)],
    queries: &[Query],
    store: Option<&KgStore>,
    options: &EvalOptions,
) -> Result<EvalReport> {
    let by_id: HashMap<&str, &Query> = queries.iter().map(|q| (q.id.as_str(), q)).collect();
    if by_id.len() != queries.len() {
        return Err(Error::InvalidArgument("duplicate query ids".into()));
    }
    let result_ids: HashSet<&str> = results.iter().map(|(id, _)| id.as_str()).collect();
    if result_ids.len() != results.len() {
        return Err(Error::InvalidArgument("duplicate result ids".into()));
    }
    let mut missing: Vec<String> = queries
        .iter()
        .filter(|q| !result_ids.contains(q.id.as_str()))
        .map(|q| q.id.clone())
        .chain(results.iter().filter(|(id, _)| !by_id.contains_key(id.as_str())).map(|(id, _)| id.clone()))
        .collect();
    if !missing.is_empty() {
        missing.sort();
        return Err(Error::IdMismatch { missing });
    }

    let mut ks: Vec<usize> = DEFAULT_HITS.iter().chain(&options.extra_hits).copied().collect();
    ks.sort_unstable();
    ks.dedup();

    // Sorting by id makes the floating-point sums independent of input order.
    let mut ordered: Vec<&(String, RankedList)> = results.iter().collect();
    ordered.sort_by(|a, b| a.0.cmp(&b.0));
    let mut rows = Vec::with_capacity(ordered.len());
    let mut strata_keys = Vec::with_capacity(ordered.len());
    for (id, ranking) in ordered {
        let q = by_id[id.as_str()];
        let containment = match &q.gold_entities {
            Some(ents) => {
                let store = store.ok_or_else(|| {
                    Error::InvalidArgument("a triplet store is required to score entity containment".into())
                })?;
                Some(entity_containment(ranking, ents, store, options.containment_k)?)
            }
            None => None,
        };
        rows.push(PerQuery {
            rr: reciprocal_rank(ranking, &q.gold, options.cutoff)?,
            hits: ks.iter().map(|&k| hits_at_k(ranking, &q.gold, k)).collect::<Result<_>>()?,
            containment,
        });
        strata_keys.push(q.hops.map_or_else(|| UNKNOWN_STRATUM.to_string(), |h| h.to_string()));
    }

    let mut grouped: BTreeMap<String, Vec<&PerQuery>> = BTreeMap::new();
    for (row, key) in rows.iter().zip(strata_keys) {
        grouped.entry(key).or_default().push(row);
    }
    let all: Vec<&PerQuery> = rows.iter().collect();
    let global = summarize(&all, &ks);
    Ok(EvalReport {
        mrr: global.mrr,
        hits: global.hits,
        strata: grouped.into_iter().map(|(k, v)| (k, summarize(&v, &ks))).collect(),
        entity_containment: global.entity_containment,
        n: global.n,
    })
}
