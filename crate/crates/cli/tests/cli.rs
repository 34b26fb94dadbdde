use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn difar(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_difar"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("spawn difar")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

const SMALL: &[&str] = &[
    "--set",
    "synth.n_triplets=120",
    "--set",
    "synth.n_entities=40",
    "--set",
    "train.epochs=3",
];

fn small(args: &[&str]) -> Vec<String> {
    args.iter().chain(SMALL).map(|s| s.to_string()).collect()
}

fn ok(dir: &Path, args: &[String]) -> Output {
    let args: Vec<&str> = args.iter().map(String::as_str).collect();
    let o = difar(dir, &args);
    assert!(o.status.success(), "{args:?} failed: {}", stderr(&o));
    o
}

#[test]
fn run_all_writes_both_reports_and_reranking_helps() {
    let dir = tempfile::tempdir().unwrap();
    let o = difar(dir.path(), &["run-all", "--out-dir", "out"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let err = stderr(&o);
    assert!(err.contains("# resolved config"));
    assert!(err.contains("[timing] retrieve:") && err.contains("queries/s"));
    let report = |name: &str| -> Value {
        serde_json::from_str(&fs::read_to_string(dir.path().join("out").join(name)).unwrap()).unwrap()
    };
    let retr = report("report_retriever.json");
    let rer = report("report_reranked.json");
    assert!(rer["mrr"].as_f64().unwrap() >= retr["mrr"].as_f64().unwrap());
}

#[test]
fn stale_index_is_reported_with_exit_code_4() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(d, &small(&["synth-gen", "--out-dir", "data"]));
    for (seed, out) in [("1", "a.bin"), ("2", "b.bin")] {
        ok(d, &small(&["train-retriever", "--seed", seed, "--kg", "data/triples.tsv", "--queries", "data/train.jsonl", "--model-out", out]));
    }
    ok(d, &small(&["build-index", "--kg", "data/triples.tsv", "--model-in", "a.bin", "--index-out", "a.idx"]));
    let o = difar(
        d,
        &["retrieve", "--kg", "data/triples.tsv", "--model-in", "b.bin", "--index-in", "a.idx", "--queries", "data/test.jsonl", "--results-out", "r.jsonl"],
    );
    assert_eq!(o.status.code(), Some(4));
    let err = stderr(&o);
    assert!(err.contains("stale index"), "{err}");
    assert!(err.contains("retrieve"), "{err}");
    assert!(!d.join("r.jsonl").exists());

    // The matching index is accepted.
    ok(
        d,
        &small(&["retrieve", "--kg", "data/triples.tsv", "--model-in", "a.bin", "--index-in", "a.idx", "--queries", "data/test.jsonl", "--results-out", "r.jsonl"]),
    );
}

#[test]
fn eval_with_missing_query_lists_its_id() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let queries = "{\"id\":\"q1\",\"text\":\"a\",\"gold\":[0]}\n{\"id\":\"q2\",\"text\":\"b\",\"gold\":[1]}\n";
    fs::write(d.join("q.jsonl"), queries).unwrap();
    fs::write(d.join("r.jsonl"), "{\"id\":\"q1\",\"ranking\":[[0,0.9],[1,0.1]]}\n").unwrap();
    let o = difar(d, &["eval", "--queries", "q.jsonl", "--results-in", "r.jsonl"]);
    assert_eq!(o.status.code(), Some(3));
    assert!(stderr(&o).contains("q2"), "{}", stderr(&o));

    fs::write(d.join("r.jsonl"), "{\"id\":\"q2\",\"ranking\":[[1,0.5]]}\n{\"id\":\"q1\",\"ranking\":[[1,0.9],[0,0.1]]}\n").unwrap();
    let o = difar(d, &["eval", "--queries", "q.jsonl", "--results-in", "r.jsonl", "--report-out", "rep.json"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let rep: Value = serde_json::from_str(&fs::read_to_string(d.join("rep.json")).unwrap()).unwrap();
    assert_eq!(rep["mrr"].as_f64().unwrap(), 0.75);
}

#[test]
fn usage_errors_exit_with_2() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    fs::write(d.join("bad.cfg"), "retreival.k = 10\n").unwrap();
    let o = difar(d, &["--config", "bad.cfg", "synth-gen", "--out-dir", "x"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("unknown config key \"retreival.k\""));

    assert_eq!(difar(d, &["retrieve", "--kg", "x"]).status.code(), Some(2));
    assert_eq!(difar(d, &["frobnicate"]).status.code(), Some(2));

    ok(d, &small(&["synth-gen", "--out-dir", "data"]));
    ok(d, &small(&["train-retriever", "--kg", "data/triples.tsv", "--queries", "data/train.jsonl", "--model-out", "m.bin"]));
    let o = difar(d, &["retrieve", "--kg", "data/triples.tsv", "--model-in", "m.bin", "--queries", "data/test.jsonl", "--results-out", "r.jsonl"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("--index-in"));
}

#[test]
fn missing_input_names_the_stage() {
    let dir = tempfile::tempdir().unwrap();
    let o = difar(dir.path(), &["build-index", "--kg", "nope.tsv", "--model-in", "m.bin", "--index-out", "i.bin"]);
    assert_eq!(o.status.code(), Some(3));
    let err = stderr(&o);
    assert!(err.contains("error: build-index: i/o error on"), "{err}");
}

#[test]
fn flags_override_config_file() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    fs::write(d.join("c.cfg"), "retrieval.k = 10\nretrieval.backend = hnsw\n").unwrap();
    let o = ok(d, &small(&["--config", "c.cfg", "--k", "3", "--backend", "exact", "synth-gen", "--out-dir", "data"]));
    let err = stderr(&o);
    assert!(err.contains("retrieval.k = 3\n") && err.contains("retrieval.backend = exact\n"), "{err}");
}

#[test]
fn stages_are_idempotent() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    for out in ["d1", "d2"] {
        ok(d, &small(&["synth-gen", "--out-dir", out]));
    }
    for f in ["triples.tsv", "train.jsonl", "valid.jsonl", "test.jsonl"] {
        assert_eq!(fs::read(d.join("d1").join(f)).unwrap(), fs::read(d.join("d2").join(f)).unwrap(), "{f}");
    }
    for out in ["m1.bin", "m2.bin"] {
        ok(d, &small(&["train-retriever", "--kg", "d1/triples.tsv", "--queries", "d1/train.jsonl", "--model-out", out]));
    }
    for m in ["m1.bin", "m2.bin"] {
        let out = format!("r-{m}.jsonl");
        ok(d, &small(&["retrieve", "--backend", "exact", "--kg", "d1/triples.tsv", "--model-in", m, "--queries", "d1/test.jsonl", "--results-out", &out]));
    }
    assert_eq!(fs::read(d.join("m1.bin")).unwrap(), fs::read(d.join("m2.bin")).unwrap());
    assert_eq!(fs::read(d.join("r-m1.bin.jsonl")).unwrap(), fs::read(d.join("r-m2.bin.jsonl")).unwrap());
}

#[test]
fn mine_negatives_excludes_golds() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(d, &small(&["synth-gen", "--out-dir", "data"]));
    ok(d, &small(&["train-retriever", "--kg", "data/triples.tsv", "--queries", "data/train.jsonl", "--model-out", "m.bin"]));
    ok(d, &small(&["mine-negatives", "--kg", "data/triples.tsv", "--model-in", "m.bin", "--queries", "data/train.jsonl", "--negatives-out", "n.jsonl"]));
    let golds: Vec<Value> = fs::read_to_string(d.join("data/train.jsonl")).unwrap().lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    let negs: Vec<Value> = fs::read_to_string(d.join("n.jsonl")).unwrap().lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(golds.len(), negs.len());
    for (q, n) in golds.iter().zip(&negs) {
        assert_eq!(q["id"], n["id"]);
        let list = n["negatives"].as_array().unwrap();
        assert!(!list.is_empty());
        for g in q["gold"].as_array().unwrap() {
            assert!(!list.contains(g));
        }
    }
}
