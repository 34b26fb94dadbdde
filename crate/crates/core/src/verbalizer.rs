//! Word-level tokenization shared by the encoder and the reranker.

use crate::kg_store::Triplet;

/// Separator placed between triplet slots and between a query and a triplet.
/// Brackets are never part of a token, so `tokenize` cannot emit it.
pub const SEP: &str = "[sep]";

#[derive(Debug, Clone, Default, PartialEq, Eq, Hash)]
pub struct TokenSequence(Vec<String>);

impl TokenSequence {
    pub fn new(tokens: Vec<String>) -> Self {
        TokenSequence(tokens)
    }

    pub fn tokens(&self) -> &[String] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &str> {
        self.0.iter().map(String::as_str)
    }

    fn push_sep(&mut self) {
        self.0.push(SEP.to_owned());
    }
}

impl<S: Into<String>> FromIterator<S> for TokenSequence {
    fn from_iter<I: IntoIterator<Item = S>>(iter: I) -> Self {
        TokenSequence(iter.into_iter().map(Into::into).collect())
    }
}

/// Lowercases and splits into maximal alphanumeric runs. Whitespace,
/// punctuation and symbols all act as boundaries and are dropped.
pub fn tokenize(text: &str) -> TokenSequence {
    let mut tokens = Vec::new();
    let mut current = String::new();
    for c in text.chars() {
        if c.is_alphanumeric() {
            current.extend(c.to_lowercase());
        } else if !current.is_empty() {
            tokens.push(std::mem::take(&mut current));
        }
    }
    if !current.is_empty() {
        tokens.push(current);
    }
    TokenSequence(tokens)
}

/// `head [sep] relation [sep] tail`.
pub fn verbalize_triplet(t: &Triplet) -> TokenSequence {
    let mut out = tokenize(&t.head);
    out.push_sep();
    out.0.extend(tokenize(&t.relation).0);
    out.push_sep();
    out.0.extend(tokenize(&t.tail).0);
    out
}

/// `query [sep] triplet`.
pub fn concat_pair(query: &TokenSequence, triplet: &TokenSequence) -> TokenSequence {
    let mut out = Vec::with_capacity(query.len() + triplet.len() + 1);
    out.extend(query.0.iter().cloned());
    out.push(SEP.to_owned());
    out.extend(triplet.0.iter().cloned());
    TokenSequence(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn seq(tokens: &[&str]) -> TokenSequence {
        tokens.iter().copied().collect()
    }

    fn triplet(h: &str, r: &str, t: &str) -> Triplet {
        Triplet {
            id: 0,
            head: h.into(),
            relation: r.into(),
            tail: t.into(),
            external_id: None,
        }
    }

    #[test]
    fn tokenize_question() {
        assert_eq!(
            tokenize("Where was Michael Phelps born?"),
            seq(&["where", "was", "michael", "phelps", "born"])
        );
        assert_eq!(tokenize(""), seq(&[]));
        assert_eq!(tokenize("U.S. 1963"), seq(&["u", "s", "1963"]));
        assert_eq!(tokenize("entity_0421"), seq(&["entity", "0421"]));
        assert_eq!(tokenize("[sep]"), seq(&["sep"]));
    }

    #[test]
    fn verbalize_examples() {
        assert_eq!(
            verbalize_triplet(&triplet("Normandy landings", "participant", "Dwight D. Eisenhower")),
            seq(&["normandy", "landings", SEP, "participant", SEP, "dwight", "d", "eisenhower"])
        );
        assert_eq!(verbalize_triplet(&triplet("a", "r", "b")), seq(&["a", SEP, "r", SEP, "b"]));
        assert_eq!(
            verbalize_triplet(&triplet("Robert F. Kennedy", "religion", "Catholicism")),
            seq(&["robert", "f", "kennedy", SEP, "religion", SEP, "catholicism"])
        );
    }

    #[test]
    fn concat_examples() {
        let t = seq(&["a", SEP, "r", SEP, "b"]);
        assert_eq!(concat_pair(&seq(&["who"]), &t), seq(&["who", SEP, "a", SEP, "r", SEP, "b"]));
        assert_eq!(concat_pair(&seq(&[]), &seq(&[])), seq(&[SEP]));

        let q = tokenize("Who was the commander of the Normandy landings?");
        let t = verbalize_triplet(&triplet("Normandy landings", "participant", "Dwight D. Eisenhower"));
        let joined = concat_pair(&q, &t);
        assert_eq!(joined.len(), q.len() + t.len() + 1);
        assert_eq!(joined.tokens()[q.len()], SEP);
    }

    proptest! {
        #[test]
        fn tokenize_never_emits_sep(s in "(\\[sep\\]|[a-zA-Z0-9 .,!?\\[\\]_-]|\\PC){0,40}") {
            let toks = tokenize(&s);
            prop_assert!(toks.iter().all(|t| t != SEP && !t.is_empty()));
            prop_assert_eq!(tokenize(&s), toks);
        }

        #[test]
        fn verbalized_length_is_additive(h in "\\PC{1,20}", r in "\\PC{1,20}", t in "\\PC{1,20}") {
            let v = verbalize_triplet(&triplet(&h, &r, &t));
            prop_assert_eq!(v.len(), tokenize(&h).len() + tokenize(&r).len() + tokenize(&t).len() + 2);
        }

        #[test]
        fn non_empty_alnum_input_gives_tokens(s in "[a-z0-9]{1,10}") {
            prop_assert!(!tokenize(&s).is_empty());
        }
    }
}
