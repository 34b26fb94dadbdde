//! Acceptance gates. Prints one PASS/FAIL line per criterion and exits
//! nonzero if any gate fails.

use std::fs;
use std::path::Path;
use std::time::Instant;

use difar_core::encoder::{contrastive_loss, loss_and_gradients, TrainingBatch};
use difar_core::evaluator::{entity_containment, hits_at_k, reciprocal_rank};
use difar_core::index::{build_exact, build_hnsw, HnswParams};
use difar_core::pipeline::{self, retrieve_all, rerank_all, run_all, PipelineConfig};
use difar_core::reranker::{bce_loss, bce_loss_and_gradients, LabeledPair};
use difar_core::seed;
use difar_core::synth::SynthConfig;
use difar_core::{
    evaluate, generate, tokenize, verbalize_triplet, Backend, EmbeddingVector, EncoderConfig, EncoderModel, EvalOptions,
    HnswIndex, KgStore, Query, RankedList, RerankerConfig, RerankerModel, RetrievalConfig, RetrieverBundle,
};
use proptest::prelude::*;
use proptest::test_runner::{Config as PropConfig, TestRunner};
use rand::seq::SliceRandom;
use rand::Rng;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

// ---------------------------------------------------------------- gradients

const FD_STEP: f32 = 1e-4;
const FD_TOL: f64 = 1e-4;
/// Components whose analytic and numeric values are both below this are
/// compared in absolute terms; a relative error on rounding noise is meaningless.
const FD_FLOOR: f64 = 1e-6;

/// Central difference over an f32 parameter, divided by the step actually
/// taken after rounding to f32.
fn central_difference(param: f32, mut loss_at: impl FnMut(f32) -> f64) -> f64 {
    let (up, down) = (param + FD_STEP, param - FD_STEP);
    (loss_at(up) - loss_at(down)) / (f64::from(up) - f64::from(down))
}

fn fd_error(analytic: f64, numeric: f64) -> f64 {
    let scale = analytic.abs().max(numeric.abs());
    if scale < FD_FLOOR {
        (analytic - numeric).abs() / FD_FLOOR
    } else {
        (analytic - numeric).abs() / scale
    }
}

fn encoder_instance(seed: u64) -> f64 {
    let mut rng = seed::rng(seed);
    let data = generate(&SynthConfig {
        n_entities: 30,
        n_relations: 4,
        n_triplets: 60,
        seed,
        ..SynthConfig::default()
    })
    .unwrap();
    let cfg = EncoderConfig {
        buckets: 64,
        dim: 6,
        normalize: seed % 2 == 0,
    };
    let mut model = EncoderModel::new(cfg, seed);
    for p in model.projection_mut() {
        *p += rng.gen_range(-0.3..0.3);
    }
    for b in model.bias_mut() {
        *b = rng.gen_range(-0.1..0.1);
    }
    let m = rng.gen_range(2..=6);
    let mut queries = data.train.clone();
    queries.shuffle(&mut rng);
    let batch = TrainingBatch {
        pairs: queries[..m].iter().map(|q| (tokenize(&q.text), q.gold[0])).collect(),
    };
    let (_, grads) = loss_and_gradients(&model, &batch, &data.store).unwrap();
    let loss = |mm: &EncoderModel| contrastive_loss(mm, &batch, &data.store).unwrap();

    let mut worst: f64 = 0.0;
    for (i, &g) in grads.bias.iter().enumerate() {
        let numeric = central_difference(model.bias()[i], |v| {
            let mut mm = model.clone();
            mm.bias_mut()[i] = v;
            loss(&mm)
        });
        worst = worst.max(fd_error(g, numeric));
    }
    for (i, &g) in grads.projection.iter().enumerate() {
        let numeric = central_difference(model.projection()[i], |v| {
            let mut mm = model.clone();
            mm.projection_mut()[i] = v;
            loss(&mm)
        });
        worst = worst.max(fd_error(g, numeric));
    }
    for (&row, rg) in &grads.rows {
        for (j, &g) in rg.iter().enumerate() {
            let idx = row * cfg.dim + j;
            let numeric = central_difference(model.table()[idx], |v| {
                let mut mm = model.clone();
                mm.table_mut()[idx] = v;
                loss(&mm)
            });
            worst = worst.max(fd_error(g, numeric));
        }
    }
    worst
}

fn reranker_instance(seed: u64) -> f64 {
    let mut rng = seed::rng(seed ^ 0x5eed);
    let data = generate(&SynthConfig {
        n_entities: 30,
        n_relations: 4,
        n_triplets: 60,
        seed,
        ..SynthConfig::default()
    })
    .unwrap();
    let cfg = RerankerConfig { buckets: 64, dim: 6 };
    let mut model = RerankerModel::new(cfg, seed);
    for w in model.weights_mut() {
        *w = rng.gen_range(-0.5..0.5);
    }
    let dot_index = model.weights().len() - 1;
    model.weights_mut()[dot_index] = rng.gen_range(-3.0..3.0);
    model.set_bias(rng.gen_range(-0.5..0.5));
    let batch: Vec<LabeledPair> = (0..rng.gen_range(1..=6))
        .map(|_| {
            let q = &data.train[rng.gen_range(0..data.train.len())];
            let t = rng.gen_range(0..data.store.len());
            LabeledPair {
                query: tokenize(&q.text),
                triplet: verbalize_triplet(data.store.get(t).unwrap()),
                label: f64::from(rng.gen_range(0..2u8)),
            }
        })
        .collect();
    let (_, grads) = bce_loss_and_gradients(&model, &batch).unwrap();
    let loss = |mm: &RerankerModel| bce_loss(mm, &batch).unwrap();

    let mut worst = fd_error(
        grads.bias,
        central_difference(model.bias(), |v| {
            let mut mm = model.clone();
            mm.set_bias(v);
            loss(&mm)
        }),
    );
    for (i, &g) in grads.weights.iter().enumerate() {
        let numeric = central_difference(model.weights()[i], |v| {
            let mut mm = model.clone();
            mm.weights_mut()[i] = v;
            loss(&mm)
        });
        worst = worst.max(fd_error(g, numeric));
    }
    for (&row, rg) in &grads.rows {
        for (j, &g) in rg.iter().enumerate() {
            let idx = row * cfg.dim + j;
            let numeric = central_difference(model.table()[idx], |v| {
                let mut mm = model.clone();
                mm.table_mut()[idx] = v;
                loss(&mm)
            });
            worst = worst.max(fd_error(g, numeric));
        }
    }
    worst
}

fn criterion_1() -> Outcome {
    const INSTANCES: u64 = 24;
    let enc = (0..INSTANCES).map(encoder_instance).fold(0.0, f64::max);
    let rer = (0..INSTANCES).map(reranker_instance).fold(0.0, f64::max);
    outcome(
        enc <= FD_TOL && rer <= FD_TOL,
        format!("max relative error over {INSTANCES} instances each: encoder {enc:.2e}, reranker {rer:.2e} (tol {FD_TOL:.0e}, h={FD_STEP:.0e})"),
    )
}

// ------------------------------------------------------------- exact search

/// Scores every vector with a plain loop and sorts the whole list.
fn naive_scan(data: &[EmbeddingVector], q: &EmbeddingVector, k: usize) -> Vec<(usize, u64)> {
    let mut all: Vec<(usize, f64)> = data
        .iter()
        .enumerate()
        .map(|(id, v)| {
            let mut s = 0.0f64;
            for j in 0..q.0.len() {
                s += f64::from(q.0[j]) * f64::from(v.0[j]);
            }
            (id, s)
        })
        .collect();
    all.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
    all.truncate(k);
    all.into_iter().map(|(id, s)| (id, (s + 0.0).to_bits())).collect()
}

fn criterion_2() -> Outcome {
    const D: usize = 64;
    let mut rng = seed::rng(2);
    let mut mismatches = 0;
    let mut ties_seen = 0usize;
    for inst in 0..200 {
        let n = rng.gen_range(1..=2000);
        // Half the instances use small integers, where every score is exact
        // and ties are everywhere; the rest use floats with duplicated rows.
        let integer = inst % 2 == 0;
        let mut data: Vec<EmbeddingVector> = (0..n)
            .map(|_| {
                EmbeddingVector(
                    (0..D)
                        .map(|_| if integer { rng.gen_range(-2..=2) as f32 } else { rng.gen_range(-1.0f32..1.0) })
                        .collect(),
                )
            })
            .collect();
        if !integer {
            for _ in 0..n / 10 {
                let (a, b) = (rng.gen_range(0..n), rng.gen_range(0..n));
                data[b] = data[a].clone();
            }
        }
        let q = EmbeddingVector((0..D).map(|_| if integer { rng.gen_range(-1..=1) as f32 } else { rng.gen_range(-1.0f32..1.0) }).collect());
        let k = rng.gen_range(1..=n + 5);
        let want = naive_scan(&data, &q, k);
        ties_seen += want.windows(2).filter(|w| w[0].1 == w[1].1).count();
        let got: Vec<(usize, u64)> = build_exact(&data)
            .unwrap()
            .search(&q, k)
            .unwrap()
            .iter()
            .map(|e| (e.id, (e.score + 0.0).to_bits()))
            .collect();
        if got != want {
            mismatches += 1;
        }
    }
    outcome(
        mismatches == 0,
        format!("200 instances (n<=2000, d=64): {mismatches} mismatches against the naive scan; {ties_seen} tied adjacent pairs exercised"),
    )
}

// -------------------------------------------------------------- HNSW recall

fn gaussian(n: usize, d: usize, rng: &mut seed::Rng) -> Vec<EmbeddingVector> {
    use rand_distr::{Distribution, StandardNormal};
    (0..n)
        .map(|_| EmbeddingVector((0..d).map(|_| StandardNormal.sample(rng)).collect()))
        .collect()
}

fn criterion_3() -> Outcome {
    let mut rng = seed::rng(3);
    let data = gaussian(10_000, 64, &mut rng);
    let queries = gaussian(100, 64, &mut rng);
    let exact = build_exact(&data).unwrap();
    let params = HnswParams::default();
    let index = build_hnsw(&data, params, 3).unwrap();
    let mut hit = 0usize;
    for q in &queries {
        let truth = exact.search(q, 10).unwrap().ids();
        let found = index.search(q, 10, params.ef_search).unwrap().ids();
        hit += found.iter().filter(|id| truth.contains(id)).count();
    }
    let recall = hit as f64 / 1000.0;
    outcome(
        recall >= 0.95,
        format!("recall@10 = {recall:.3} on 10k Gaussian d=64, 100 queries (M={}, efC={}, ef={}; gate 0.95)", params.m, params.ef_construction, params.ef_search),
    )
}

// ------------------------------------------------------- trained benchmark

struct Benchmark {
    config: PipelineConfig,
    data: difar_core::SynthDataset,
    output: pipeline::RunOutput,
}

fn load_bundle(dir: &Path, store: &KgStore) -> RetrieverBundle {
    let model = EncoderModel::load(dir.join(pipeline::MODEL_FILE)).unwrap();
    let index = HnswIndex::load(dir.join(pipeline::INDEX_FILE)).unwrap();
    RetrieverBundle::new(model, store.clone()).unwrap().with_hnsw(index).unwrap()
}

fn mrr(bundle: &RetrieverBundle, queries: &[Query], retrieval: &RetrievalConfig, store: &KgStore) -> difar_core::EvalReport {
    let ranked = retrieve_all(bundle, queries, retrieval).unwrap();
    evaluate(&ranked, queries, Some(store), &EvalOptions::default()).unwrap()
}

fn criterion_4(b: &Benchmark, dir: &Path) -> Outcome {
    let bundle = load_bundle(dir, &b.data.store);
    let exact = mrr(&bundle, &b.data.test, &RetrievalConfig { backend: Backend::Exact, ..b.config.retrieval }, &b.data.store).mrr;
    let hnsw = mrr(&bundle, &b.data.test, &RetrievalConfig { backend: Backend::Hnsw, ..b.config.retrieval }, &b.data.store).mrr;
    let gap = exact - hnsw;
    outcome(gap <= 0.01, format!("MRR exact {exact:.4}, HNSW+SQ {hnsw:.4}, gap {gap:.4} (gate 0.01)"))
}

fn criterion_5(b: &Benchmark, dir: &Path) -> Outcome {
    let exact_cfg = RetrievalConfig {
        backend: Backend::Exact,
        ..b.config.retrieval
    };
    let trained = load_bundle(dir, &b.data.store);
    let untrained = RetrieverBundle::new(EncoderModel::new(b.config.encoder, b.config.encoder_seed()), b.data.store.clone()).unwrap();
    let t = mrr(&trained, &b.data.test, &exact_cfg, &b.data.store).hits_at(10).unwrap();
    let u = mrr(&untrained, &b.data.test, &exact_cfg, &b.data.store).hits_at(10).unwrap();
    let s = &b.config.synth;
    outcome(
        t >= 0.90 && t >= 5.0 * u,
        format!(
            "test Hits@10 trained {t:.3} vs untrained {u:.3} (ratio {:.1}); synth {} triplets, {} q/triplet, multi-hop {}, seed {}",
            t / u.max(1e-12),
            s.n_triplets,
            s.queries_per_triplet,
            s.multi_hop_fraction,
            s.seed
        ),
    )
}

fn criterion_6(b: &Benchmark) -> Outcome {
    let (r, x) = (&b.output.retriever_report, &b.output.reranked_report);
    let gain = |k: &str| x.strata[k].hits[&1] - r.strata[k].hits[&1];
    let (single, multi) = (gain("1"), gain("2"));
    let h1 = (r.hits_at(1).unwrap(), x.hits_at(1).unwrap());
    let pass = h1.1 >= h1.0 && x.mrr >= r.mrr && multi >= single - 0.05;
    outcome(
        pass,
        format!(
            "Hits@1 {:.3} -> {:.3}, MRR {:.4} -> {:.4}; Hits@1 gain single-hop {single:+.3}, multi-hop {multi:+.3}",
            h1.0, h1.1, r.mrr, x.mrr
        ),
    )
}

// ----------------------------------------------------------------- metrics

fn criterion_7() -> Outcome {
    let list = |ids: &[usize]| RankedList::top_k(ids.iter().enumerate().map(|(i, &id)| (id, -(i as f64))), ids.len());
    let mut failures = Vec::new();
    let mut check = |name: &str, ok: bool| {
        if !ok {
            failures.push(name.to_string());
        }
    };
    let long: Vec<usize> = (0..1500).collect();
    check("rr first", reciprocal_rank(&list(&[7, 1, 2]), &[7], 1000).unwrap() == 1.0);
    check("rr fourth", reciprocal_rank(&list(&[9, 8, 6, 5, 4]), &[5], 1000).unwrap() == 0.25);
    check("rr beyond cutoff", reciprocal_rank(&list(&long), &[1200], 1000).unwrap() == 0.0);
    check("rr multi-gold first correct", reciprocal_rank(&list(&[3, 4, 5]), &[5, 4], 1000).unwrap() == 0.5);
    check("hits at K", hits_at_k(&list(&[1, 2, 3]), &[3], 3).unwrap() == 1);
    check("hits at K+1", hits_at_k(&list(&[1, 2, 3, 4]), &[4], 3).unwrap() == 0);
    check("hits K past end", hits_at_k(&list(&[1, 2]), &[2], 50).unwrap() == 1);

    let queries: Vec<Query> = (0..2)
        .map(|i| Query {
            id: format!("q{i}"),
            text: String::new(),
            gold: vec![0],
            hops: Some(1),
            gold_entities: None,
        })
        .collect();
    let results = vec![("q0".to_string(), list(&[0, 1])), ("q1".to_string(), list(&[1, 0]))];
    let report = evaluate(&results, &queries, None, &EvalOptions::default()).unwrap();
    check("mrr average", report.mrr == 0.75);
    check("single stratum equals global", report.strata["1"].mrr == report.mrr && report.strata["1"].hits == report.hits);

    let store = KgStore::from_triples([("Albany", "capital of", "New York"), ("x", "Albany", "y")]).unwrap();
    let albany = vec!["Albany".to_string()];
    check("containment head", entity_containment(&list(&[0]), &albany, &store, 1).unwrap() == 1);
    check("containment relation slot", entity_containment(&list(&[1]), &albany, &store, 1).unwrap() == 0);
    check("containment case", entity_containment(&list(&[0]), &["albany".to_string()], &store, 1).unwrap() == 1);

    // Property: Hits@K is non-decreasing in K for any ranking and gold set.
    let mut runner = TestRunner::new_with_rng(PropConfig { failure_persistence: None, ..PropConfig::with_cases(512) }, proptest::test_runner::TestRng::deterministic_rng(proptest::test_runner::RngAlgorithm::ChaCha));
    let strategy = (
        Just((0..60usize).collect::<Vec<_>>()).prop_shuffle(),
        1usize..60,
        prop::collection::vec(0usize..80, 1..4),
    );
    let prop = runner.run(&strategy, |(ids, len, gold)| {
        let ranking = list(&ids[..len]);
        let mut prev = 0u8;
        for k in 1..=70 {
            let h = hits_at_k(&ranking, &gold, k).unwrap();
            prop_assert!(h >= prev, "hits@{} = {} after {}", k, h, prev);
            prev = h;
        }
        Ok(())
    });
    if let Err(e) = prop {
        failures.push(format!("monotonicity proptest: {e}"));
    }
    outcome(
        failures.is_empty(),
        if failures.is_empty() {
            "metric examples pass; hits@K monotone in K over 512 generated cases".to_string()
        } else {
            format!("failed: {}", failures.join(", "))
        },
    )
}

// ------------------------------------------------------------ determinism

fn criterion_8(dir_a: &Path, dir_b: &Path) -> Outcome {
    let mut names: Vec<String> = Vec::new();
    let mut differing = Vec::new();
    for entry in walk(dir_a) {
        let rel = entry.strip_prefix(dir_a).unwrap().to_path_buf();
        let other = dir_b.join(&rel);
        if fs::read(&entry).ok() != fs::read(&other).ok() {
            differing.push(rel.display().to_string());
        }
        names.push(rel.display().to_string());
    }
    let required = [
        pipeline::MODEL_FILE,
        pipeline::INDEX_FILE,
        pipeline::RERANKER_FILE,
        pipeline::RETRIEVER_REPORT_FILE,
        pipeline::RERANKED_REPORT_FILE,
    ];
    let all_present = required.iter().all(|r| names.iter().any(|n| n == r));
    outcome(
        differing.is_empty() && all_present && walk(dir_b).len() == names.len(),
        format!("{} files compared across two run-all invocations; differing: {:?}", names.len(), differing),
    )
}

fn walk(dir: &Path) -> Vec<std::path::PathBuf> {
    let mut out = Vec::new();
    for entry in fs::read_dir(dir).unwrap() {
        let p = entry.unwrap().path();
        if p.is_dir() {
            out.extend(walk(&p));
        } else {
            out.push(p);
        }
    }
    out.sort();
    out
}

// --------------------------------------------------------------- snapshots

fn criterion_9(b: &Benchmark, dir: &Path) -> Outcome {
    let store = &b.data.store;
    let queries = &b.data.test[..50];
    let cfg = &b.config;
    let model = EncoderModel::load(dir.join(pipeline::MODEL_FILE)).unwrap();
    let index = HnswIndex::load(dir.join(pipeline::INDEX_FILE)).unwrap();
    let reranker = RerankerModel::load(dir.join(pipeline::RERANKER_FILE)).unwrap();

    // Round-trip each snapshot through memory and compare outputs bit for bit.
    let mut bytes = Vec::new();
    model.write_snapshot(&mut bytes).unwrap();
    let model2 = EncoderModel::read_snapshot(bytes.as_slice()).unwrap();
    bytes.clear();
    index.write_snapshot(&mut bytes).unwrap();
    let index2 = HnswIndex::read_snapshot(bytes.as_slice()).unwrap();
    bytes.clear();
    reranker.write_snapshot(&mut bytes).unwrap();
    let reranker2 = RerankerModel::read_snapshot(bytes.as_slice()).unwrap();

    let run = |m: EncoderModel, i: HnswIndex, r: &RerankerModel| {
        let bundle = RetrieverBundle::new(m, store.clone()).unwrap().with_hnsw(i).unwrap();
        let retrieved = retrieve_all(&bundle, queries, &cfg.retrieval).unwrap();
        let reranked = rerank_all(r, queries, &retrieved, store, cfg.top_k_rerank).unwrap();
        let bits = |v: &[(String, RankedList)]| -> Vec<(String, Vec<(usize, u64)>)> {
            v.iter().map(|(id, l)| (id.clone(), l.iter().map(|e| (e.id, e.score.to_bits())).collect())).collect()
        };
        (bits(&retrieved), bits(&reranked))
    };
    let a = run(model.clone(), index.clone(), &reranker);
    let c = run(model2, index2, &reranker2);
    let same_params = model == EncoderModel::load(dir.join(pipeline::MODEL_FILE)).unwrap()
        && reranker == reranker2
        && index == HnswIndex::load(dir.join(pipeline::INDEX_FILE)).unwrap();
    outcome(
        a == c && same_params,
        format!("encoder/index/reranker snapshots reloaded; retrieval and reranking on 50 queries bit-identical: {}", a == c),
    )
}

fn main() {
    let start = Instant::now();
    let mut outcomes: Vec<(u32, &str, Outcome, f64)> = Vec::new();
    let mut run = |n: u32, name: &'static str, f: &mut dyn FnMut() -> Outcome| {
        let t = Instant::now();
        let o = f();
        outcomes.push((n, name, o, t.elapsed().as_secs_f64()));
    };

    run(1, "gradient oracles", &mut criterion_1);
    run(2, "exact search = naive scan", &mut criterion_2);
    run(3, "HNSW+SQ recall@10", &mut criterion_3);

    let tmp = tempfile::tempdir().unwrap();
    let (dir_a, dir_b) = (tmp.path().join("run-a"), tmp.path().join("run-b"));
    let config = PipelineConfig::default();
    let data = generate(&config.synth).unwrap();
    let t = Instant::now();
    let output = run_all(&config, &dir_a).unwrap();
    let first_run = t.elapsed().as_secs_f64();
    run_all(&config, &dir_b).unwrap();
    let bench = Benchmark { config, data, output };

    run(4, "exact vs HNSW MRR gap", &mut || criterion_4(&bench, &dir_a));
    run(5, "training improves retrieval", &mut || criterion_5(&bench, &dir_a));
    run(6, "reranking direction", &mut || criterion_6(&bench));
    run(7, "metric suite", &mut criterion_7);
    run(8, "run-all determinism", &mut || criterion_8(&dir_a, &dir_b));
    run(9, "snapshot round-trip", &mut || criterion_9(&bench, &dir_a));

    println!();
    println!("acceptance (pipeline run: {first_run:.1}s)");
    let mut failed = 0;
    for (n, name, o, secs) in &outcomes {
        if !o.pass {
            failed += 1;
        }
        println!("{} criterion {n} ({name}): {} [{secs:.1}s]", if o.pass { "PASS" } else { "FAIL" }, o.detail);
    }
    println!("{}/{} criteria passed in {:.1}s", outcomes.len() - failed, outcomes.len(), start.elapsed().as_secs_f64());
    if failed > 0 {
        std::process::exit(1);
    }
}
