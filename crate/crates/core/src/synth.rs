//! Seeded synthetic knowledge graph with templated questions.
//!
//! Entities are labelled `entity_0421`, relations `relation_07`. Questions
//! never use the relation label itself: each relation owns a few alias
//! words ("capital", "spouse", ...) that appear only in question text, so a
//! retriever has to learn which alias goes with which relation, while the
//! entity label is shared verbatim between question and triplet.
//!
//! The phrase for `(h, r, t)` is `<alias r> of <h>` with gold `[that triplet]`;
//! through a bridge `(e, r', h)` it becomes `<alias r> of the <alias r'> of
//! <e>` with gold `[bridge, answer]`. The phrase is then wrapped in one of a
//! few wordy question frames ("could you please tell me what the ... is?"),
//! which keeps an untrained bag-of-words model from matching by accident.

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::{index, SliceRandom};
use rand::Rng as _;

use crate::error::{Error, Result};
use crate::kg_store::KgStore;
use crate::query::{write_jsonl, Query};
use crate::seed;

/// Words used as relation aliases in question text.
const ALIAS_WORDS: &[&str] = &[
    "capital", "spouse", "founder", "mayor", "author", "director", "language", "currency", "anthem", "river",
    "mountain", "birthplace", "employer", "religion", "coach", "owner", "sponsor", "designer", "composer",
    "producer", "successor", "predecessor", "sibling", "parent", "child", "teacher", "student", "rival", "partner",
    "neighbor", "ancestor", "heir", "mascot", "motto", "emblem", "harbor", "airport", "stadium", "museum", "library",
    "cathedral", "bridge", "island", "province", "district", "county", "village", "parish", "colony", "dynasty",
    "empire", "kingdom", "republic", "senator", "governor", "minister", "general", "admiral", "bishop", "abbot",
    "painter", "sculptor", "poet", "novelist", "playwright", "singer", "drummer", "guitarist", "pianist", "dancer",
];

/// Question frames; `{}` is replaced by the relation/entity phrase.
const TEMPLATES: &[&str] = &[
    "could you please tell me what the {} is?",
    "i am trying to find out which one is the {}.",
    "does anybody here happen to know the {}?",
    "help me look up the {} in the graph, please.",
    "in this knowledge base, what would be the {}?",
];

pub const ALIASES_PER_RELATION: usize = 1;
pub const TRIPLES_FILE: &str = "triples.tsv";
pub const SPLIT_FILES: [&str; 3] = ["train.jsonl", "valid.jsonl", "test.jsonl"];

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SynthConfig {
    pub n_entities: usize,
    pub n_relations: usize,
    pub n_triplets: usize,
    pub queries_per_triplet: usize,
    pub multi_hop_fraction: f64,
    /// Fraction of questions that also name an unrelated entity.
    pub distractor_rate: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            n_entities: 200,
            n_relations: 20,
            n_triplets: 1000,
            queries_per_triplet: 1,
            multi_hop_fraction: 0.2,
            distractor_rate: 0.1,
            seed: 42,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SynthDataset {
    pub store: KgStore,
    pub train: Vec<Query>,
    pub valid: Vec<Query>,
    pub test: Vec<Query>,
}

impl SynthDataset {
    pub fn queries(&self) -> impl Iterator<Item = &Query> {
        self.train.iter().chain(&self.valid).chain(&self.test)
    }

    /// Writes `triples.tsv` and the three split files into `dir`.
    pub fn write(&self, dir: impl AsRef<Path>) -> Result<Vec<PathBuf>> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let triples = dir.join(TRIPLES_FILE);
        self.store.save(&triples)?;
        let mut paths = vec![triples];
        for (name, split) in SPLIT_FILES.iter().zip([&self.train, &self.valid, &self.test]) {
            let p = dir.join(name);
            write_jsonl(&p, split)?;
            paths.push(p);
        }
        Ok(paths)
    }
}

pub fn entity_label(e: usize) -> String {
    format!("entity_{e:04}")
}

pub fn relation_label(r: usize) -> String {
    format!("relation_{r:02}")
}

/// Alias `v` of relation `r`. Distinct (relation, variant) pairs never share a word.
pub fn relation_alias(r: usize, v: usize) -> String {
    let k = r * ALIASES_PER_RELATION + v;
    let word = ALIAS_WORDS[k % ALIAS_WORDS.len()];
    match k / ALIAS_WORDS.len() {
        0 => word.to_string(),
        round => format!("{word}{round}"),
    }
}

fn validate(c: &SynthConfig) -> Result<()> {
    let positive = [
        ("n_entities", c.n_entities),
        ("n_relations", c.n_relations),
        ("n_triplets", c.n_triplets),
        ("queries_per_triplet", c.queries_per_triplet),
    ];
    for (name, v) in positive {
        if v == 0 {
            return Err(Error::InvalidArgument(format!("{name} must be positive")));
        }
    }
    for (name, v) in [("multi_hop_fraction", c.multi_hop_fraction), ("distractor_rate", c.distractor_rate)] {
        if !(0.0..=1.0).contains(&v) {
            return Err(Error::InvalidArgument(format!("{name} must be in [0, 1], got {v}")));
        }
    }
    if c.distractor_rate > 0.0 && c.n_entities < 2 {
        return Err(Error::Infeasible("distractors need at least two entities".into()));
    }
    let capacity = (c.n_entities as u128) * (c.n_entities as u128) * (c.n_relations as u128);
    if c.n_triplets as u128 > capacity {
        return Err(Error::Infeasible(format!(
            "{} triplets requested but only {capacity} distinct (head, relation, tail) combinations exist",
            c.n_triplets
        )));
    }
    Ok(())
}

/// Distinct `(head, relation, tail)` index triples.
///
/// While the request fits, relations are typed: each relation splits the
/// entities into a head half and a tail half, and every `(head, relation)`
/// pair is used at most once. A bag of words cannot tell `(x, r, y)` from
/// `(z, r, x)`, so typing keeps single-hop questions answerable by content
/// rather than by memorised priors.
fn place_triplets(c: &SynthConfig, rng: &mut seed::Rng) -> Result<Vec<(usize, usize, usize)>> {
    let (ne, nr) = (c.n_entities, c.n_relations);
    let n_heads = ne - ne / 2;
    if ne >= 2 && c.n_triplets <= n_heads * nr {
        let sides: Vec<Vec<usize>> = (0..nr)
            .map(|_| {
                let mut order: Vec<usize> = (0..ne).collect();
                order.shuffle(rng);
                order
            })
            .collect();
        let slots = index::sample(rng, n_heads * nr, c.n_triplets);
        Ok(slots
            .into_iter()
            .map(|s| {
                let (i, r) = (s / nr, s % nr);
                let t = sides[r][n_heads + rng.gen_range(0..ne / 2)];
                (sides[r][i], r, t)
            })
            .collect())
    } else {
        let space = ne
            .checked_mul(ne)
            .and_then(|v| v.checked_mul(nr))
            .ok_or_else(|| Error::Infeasible("triplet space too large to sample".into()))?;
        Ok(index::sample(rng, space, c.n_triplets)
            .into_iter()
            .map(|s| (s / (ne * nr), (s / ne) % nr, s % ne))
            .collect())
    }
}

pub fn generate(config: &SynthConfig) -> Result<SynthDataset> {
    validate(config)?;
    let mut rng = seed::rng(seed::sub_seed(config.seed, "synth"));
    let placed = place_triplets(config, &mut rng)?;
    let store = KgStore::from_triples(
        placed
            .iter()
            .map(|&(h, r, t)| (entity_label(h), relation_label(r), entity_label(t))),
    )?;
    debug_assert_eq!(store.len(), placed.len());

    let mut incoming: HashMap<usize, Vec<usize>> = HashMap::new();
    for (id, &(_, _, t)) in placed.iter().enumerate() {
        incoming.entry(t).or_default().push(id);
    }
    let bridges_for = |id: usize| -> Vec<usize> {
        incoming
            .get(&placed[id].0)
            .map(|v| v.iter().copied().filter(|&b| b != id).collect())
            .unwrap_or_default()
    };

    let total = config.n_triplets * config.queries_per_triplet;
    let n_multi = (config.multi_hop_fraction * total as f64).round() as usize;
    let mut eligible: Vec<usize> = (0..total)
        .filter(|&slot| !bridges_for(slot / config.queries_per_triplet).is_empty())
        .collect();
    if eligible.len() < n_multi {
        return Err(Error::Infeasible(format!(
            "{n_multi} two-hop questions requested but only {} triplets have a bridging edge",
            eligible.len()
        )));
    }
    eligible.shuffle(&mut rng);
    let mut is_multi = vec![false; total];
    for &slot in &eligible[..n_multi] {
        is_multi[slot] = true;
    }

    let width = total.to_string().len();
    let mut queries = Vec::with_capacity(total);
    for slot in 0..total {
        let id = slot / config.queries_per_triplet;
        let (h, r, _) = placed[id];
        let alias = relation_alias(r, rng.gen_range(0..ALIASES_PER_RELATION));
        let (mut phrase, gold, hops, mentioned) = if is_multi[slot] {
            let bridges = bridges_for(id);
            let b = bridges[rng.gen_range(0..bridges.len())];
            let (e, r2, _) = placed[b];
            let alias2 = relation_alias(r2, rng.gen_range(0..ALIASES_PER_RELATION));
            (
                format!("{alias} of the {alias2} of {}", entity_label(e)),
                vec![b, id],
                2,
                e,
            )
        } else {
            (format!("{alias} of {}", entity_label(h)), vec![id], 1, h)
        };
        if rng.gen_bool(config.distractor_rate) {
            let other = (mentioned + 1 + rng.gen_range(0..config.n_entities - 1)) % config.n_entities;
            phrase.push_str(&format!(" (not {})", entity_label(other)));
        }
        let text = TEMPLATES[rng.gen_range(0..TEMPLATES.len())].replace("{}", &phrase);
        queries.push(Query {
            id: format!("q{slot:0width$}"),
            text,
            gold,
            hops: Some(hops),
            gold_entities: Some(vec![entity_label(mentioned)]),
        });
    }

    queries.shuffle(&mut rng);
    let n_train = total * 70 / 100;
    let n_valid = total * 15 / 100;
    let test = queries.split_off(n_train + n_valid);
    let valid = queries.split_off(n_train);
    Ok(SynthDataset {
        store,
        train: queries,
        valid,
        test,
    })
}
