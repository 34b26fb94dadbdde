//! Knowledge-graph triplet store.
//!
//! Triplets are loaded from a tab-separated file (`head<TAB>relation<TAB>tail`
//! with an optional fourth external-id column), deduplicated on the trimmed
//! string triple, and addressed by dense load-order ids.

use std::collections::HashMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};

/// One knowledge-graph fact.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Triplet {
    pub id: usize,
    pub head: String,
    pub relation: String,
    pub tail: String,
    /// Opaque id from the source KG, when the file carries a fourth column.
    pub external_id: Option<String>,
}

/// Immutable, id-addressable collection of triplets.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct KgStore {
    triplets: Vec<Triplet>,
    duplicates_dropped: usize,
}

impl KgStore {
    /// Builds a store from `(head, relation, tail)` labels, dropping exact
    /// duplicates after trimming. Empty labels are rejected.
    pub fn from_triples<I, S>(triples: I) -> Result<Self>
    where
        I: IntoIterator<Item = (S, S, S)>,
        S: AsRef<str>,
    {
        let mut builder = Builder::default();
        for (n, (h, r, t)) in triples.into_iter().enumerate() {
            builder
                .push(h.as_ref(), r.as_ref(), t.as_ref(), None)
                .map_err(|message| Error::Parse {
                    path: "<memory>".into(),
                    line: n + 1,
                    message,
                })?;
        }
        Ok(builder.finish())
    }

    /// Loads a TSV triple file.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, path)
    }

    fn parse(text: &str, path: &Path) -> Result<Self> {
        let mut builder = Builder::default();
        for (n, raw) in text.lines().enumerate() {
            let line_no = n + 1;
            let line = raw.strip_suffix('\r').unwrap_or(raw);
            // A trailing blank line is tolerated; blank lines elsewhere are not facts.
            if line.trim().is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split('\t').collect();
            let (h, r, t, ext) = match fields.as_slice() {
                [h, r, t] => (*h, *r, *t, None),
                [h, r, t, x] => (*h, *r, *t, Some(*x)),
                other => {
                    return Err(Error::Parse {
                        path: path.to_path_buf(),
                        line: line_no,
                        message: format!("expected 3 or 4 tab-separated fields, found {}", other.len()),
                    })
                }
            };
            builder.push(h, r, t, ext).map_err(|message| Error::Parse {
                path: path.to_path_buf(),
                line: line_no,
                message,
            })?;
        }
        Ok(builder.finish())
    }

    /// Writes the store back out in the TSV format `load` reads.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut out = Vec::new();
        for t in &self.triplets {
            match &t.external_id {
                Some(x) => writeln!(out, "{}\t{}\t{}\t{}", t.head, t.relation, t.tail, x),
                None => writeln!(out, "{}\t{}\t{}", t.head, t.relation, t.tail),
            }
            .expect("write to Vec");
        }
        fs::write(path, out).map_err(|e| Error::io(path, e))
    }

    pub fn get(&self, id: usize) -> Result<&Triplet> {
        self.triplets.get(id).ok_or(Error::OutOfRange {
            id,
            len: self.triplets.len(),
        })
    }

    pub fn len(&self) -> usize {
        self.triplets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.triplets.is_empty()
    }

    /// Number of exact duplicates skipped while loading.
    pub fn duplicates_dropped(&self) -> usize {
        self.duplicates_dropped
    }

    /// Triplets in id order.
    pub fn iter(&self) -> std::slice::Iter<'_, Triplet> {
        self.triplets.iter()
    }

    pub fn triplets(&self) -> &[Triplet] {
        &self.triplets
    }
}

impl<'a> IntoIterator for &'a KgStore {
    type Item = &'a Triplet;
    type IntoIter = std::slice::Iter<'a, Triplet>;

    fn into_iter(self) -> Self::IntoIter {
        self.triplets.iter()
    }
}

#[derive(Default)]
struct Builder {
    triplets: Vec<Triplet>,
    seen: HashMap<(String, String, String), usize>,
    duplicates: usize,
}

impl Builder {
    fn push(&mut self, h: &str, r: &str, t: &str, ext: Option<&str>) -> std::result::Result<(), String> {
        let (h, r, t) = (h.trim(), r.trim(), t.trim());
        for (name, value) in [("head", h), ("relation", r), ("tail", t)] {
            if value.is_empty() {
                return Err(format!("empty {name} field"));
            }
        }
        let key = (h.to_owned(), r.to_owned(), t.to_owned());
        if self.seen.contains_key(&key) {
            self.duplicates += 1;
            return Ok(());
        }
        let id = self.triplets.len();
        self.seen.insert(key, id);
        self.triplets.push(Triplet {
            id,
            head: h.to_owned(),
            relation: r.to_owned(),
            tail: t.to_owned(),
            external_id: ext.map(str::trim).filter(|x| !x.is_empty()).map(str::to_owned),
        });
        Ok(())
    }

    fn finish(self) -> KgStore {
        debug_assert!(self.triplets.iter().enumerate().all(|(i, t)| t.id == i));
        debug_assert_eq!(self.seen.len(), self.triplets.len());
        KgStore {
            triplets: self.triplets,
            duplicates_dropped: self.duplicates,
        }
    }
}
