//! Query and result records plus their JSONL files.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::index::RankedList;

/// A natural-language input with its gold triplet ids.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Query {
    pub id: String,
    pub text: String,
    pub gold: Vec<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub hops: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gold_entities: Option<Vec<String>>,
}

/// One line of a results file: `{"id": ..., "ranking": [[triplet_id, score], ...]}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryResult {
    pub id: String,
    pub ranking: Vec<(usize, f64)>,
}

impl QueryResult {
    pub fn new(id: impl Into<String>, ranking: &RankedList) -> Self {
        QueryResult {
            id: id.into(),
            ranking: ranking.iter().map(|e| (e.id, e.score)).collect(),
        }
    }

    pub fn to_ranked_list(&self) -> RankedList {
        RankedList::from_sorted_unchecked(self.ranking.iter().copied())
    }
}

pub fn read_jsonl<T: for<'de> Deserialize<'de>>(path: impl AsRef<Path>) -> Result<Vec<T>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(n, line)| {
            serde_json::from_str(line).map_err(|e| Error::Parse {
                path: path.to_path_buf(),
                line: n + 1,
                message: e.to_string(),
            })
        })
        .collect()
}

pub fn write_jsonl<T: Serialize>(path: impl AsRef<Path>, records: &[T]) -> Result<()> {
    let path = path.as_ref();
    let mut out = Vec::new();
    for r in records {
        serde_json::to_writer(&mut out, r).expect("records serialize");
        out.push(b'\n');
    }
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&out).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn optional_fields_are_optional() {
        let q: Query = serde_json::from_str(r#"{"id":"q1","text":"who?","gold":[3]}"#).unwrap();
        assert_eq!(q.hops, None);
        assert_eq!(q.gold_entities, None);
        assert_eq!(serde_json::to_string(&q).unwrap(), r#"{"id":"q1","text":"who?","gold":[3]}"#);
    }

    #[test]
    fn result_line_shape() {
        let r = QueryResult {
            id: "q".into(),
            ranking: vec![(4, 0.5), (1, 0.25)],
        };
        assert_eq!(serde_json::to_string(&r).unwrap(), r#"{"id":"q","ranking":[[4,0.5],[1,0.25]]}"#);
    }

    #[test]
    fn bad_line_reports_line_number() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("q.jsonl");
        fs::write(&p, "{\"id\":\"a\",\"text\":\"x\",\"gold\":[0]}\n{oops}\n").unwrap();
        let err = read_jsonl::<Query>(&p).unwrap_err();
        assert!(matches!(err, Error::Parse { line: 2, .. }));
    }
}
