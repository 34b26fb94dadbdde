use std::cmp::Ordering;
use std::collections::BinaryHeap;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RankedEntry {
    pub id: usize,
    pub score: f64,
}

/// Total order used by every ranking: higher score first, then lower id.
/// `-0.0` and `0.0` compare equal.
pub fn rank_order(a: &RankedEntry, b: &RankedEntry) -> Ordering {
    (b.score + 0.0)
        .total_cmp(&(a.score + 0.0))
        .then(a.id.cmp(&b.id))
}

struct ByRank(RankedEntry);

impl Ord for ByRank {
    fn cmp(&self, other: &Self) -> Ordering {
        rank_order(&self.0, &other.0)
    }
}

impl PartialOrd for ByRank {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl PartialEq for ByRank {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}

impl Eq for ByRank {}

/// Results ordered under [`rank_order`], without duplicate ids.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct RankedList {
    entries: Vec<RankedEntry>,
}

impl RankedList {
    /// Keeps the best `k` of the `(id, score)` pairs, in rank order.
    pub fn top_k(scores: impl IntoIterator<Item = (usize, f64)>, k: usize) -> Self {
        // Max-heap under rank_order: the worst kept entry is on top, so most
        // candidates are rejected after a single comparison.
        let mut kept: BinaryHeap<ByRank> = BinaryHeap::with_capacity(k.min(1 << 16) + 1);
        for (id, score) in scores {
            let e = RankedEntry { id, score };
            if kept.len() < k {
                kept.push(ByRank(e));
            } else if let Some(mut worst) = kept.peek_mut() {
                if rank_order(&e, &worst.0) == Ordering::Less {
                    *worst = ByRank(e);
                }
            }
        }
        RankedList {
            entries: kept.into_sorted_vec().into_iter().map(|b| b.0).collect(),
        }
    }

    /// Wraps entries that are already in order (e.g. read back from a results file).
    pub fn from_sorted_unchecked(entries: impl IntoIterator<Item = (usize, f64)>) -> Self {
        RankedList {
            entries: entries.into_iter().map(|(id, score)| RankedEntry { id, score }).collect(),
        }
    }

    pub(crate) fn from_entries_unchecked(entries: Vec<RankedEntry>) -> Self {
        RankedList { entries }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> std::slice::Iter<'_, RankedEntry> {
        self.entries.iter()
    }

    pub fn entries(&self) -> &[RankedEntry] {
        &self.entries
    }

    pub fn ids(&self) -> Vec<usize> {
        self.entries.iter().map(|e| e.id).collect()
    }

    pub fn first(&self) -> Option<&RankedEntry> {
        self.entries.first()
    }

    /// 0-based position of `id`, if present.
    pub fn position(&self, id: usize) -> Option<usize> {
        self.entries.iter().position(|e| e.id == id)
    }

    /// True when strictly sorted under [`rank_order`] (which also rules out duplicate ids
    /// among equal scores).
    pub fn is_well_ordered(&self) -> bool {
        let mut seen = std::collections::HashSet::new();
        self.entries.windows(2).all(|w| rank_order(&w[0], &w[1]) == Ordering::Less)
            && self.entries.iter().all(|e| seen.insert(e.id))
    }
}

impl<'a> IntoIterator for &'a RankedList {
    type Item = &'a RankedEntry;
    type IntoIter = std::slice::Iter<'a, RankedEntry>;

    fn into_iter(self) -> Self::IntoIter {
        self.entries.iter()
    }
}
