//! Fuzzy de-duplication of samples by word-trigram multisets.
//!
//! `s1` is a duplicate of `s2` when `|tri(s1) ∩ tri(s2)| >= |tri(s1)| / 2`,
//! with multiset intersection `Σ min(m1, m2)`. The relation is asymmetric
//! and not transitive, so [`dedup_ranked`] compares each candidate against
//! the samples kept so far, in rank order.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};
use unicode_general_category::{get_general_category, GeneralCategory};

fn is_punctuation(c: char) -> bool {
    matches!(
        get_general_category(c),
        GeneralCategory::ConnectorPunctuation
            | GeneralCategory::DashPunctuation
            | GeneralCategory::OpenPunctuation
            | GeneralCategory::ClosePunctuation
            | GeneralCategory::InitialPunctuation
            | GeneralCategory::FinalPunctuation
            | GeneralCategory::OtherPunctuation
    )
}

/// Maximal runs of characters that are neither whitespace nor Unicode
/// punctuation (general category P*).
pub fn words(text: &str) -> impl Iterator<Item = &str> {
    text.split(|c: char| c.is_whitespace() || is_punctuation(c))
        .filter(|w| !w.is_empty())
}

/// Joins three words into the canonical trigram key.
pub(crate) fn trigram_key(w: &[&str]) -> String {
    let mut key = String::with_capacity(w[0].len() + w[1].len() + w[2].len() + 2);
    key.push_str(w[0]);
    key.push(' ');
    key.push_str(w[1]);
    key.push(' ');
    key.push_str(w[2]);
    key
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrigramMultiset {
    entries: HashMap<String, u32>,
    total: u32,
}

impl TrigramMultiset {
    pub fn get(&self, trigram: &str) -> u32 {
        self.entries.get(trigram).copied().unwrap_or(0)
    }

    /// Sum of multiplicities.
    pub fn total(&self) -> u32 {
        self.total
    }

    pub fn distinct(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.total == 0
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, u32)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), *v))
    }

    /// `Σ_key min(self[key], other[key])`.
    pub fn intersection_size(&self, other: &TrigramMultiset) -> u32 {
        let (small, large) = if self.entries.len() <= other.entries.len() {
            (self, other)
        } else {
            (other, self)
        };
        small
            .entries
            .iter()
            .map(|(k, m)| (*m).min(large.get(k)))
            .sum()
    }

    /// Whether `self` is a duplicate of `other` (directed).
    pub fn duplicates(&self, other: &TrigramMultiset) -> bool {
        2 * self.intersection_size(other) >= self.total
    }
}

pub fn trigram_multiset(text: &str) -> TrigramMultiset {
    let ws: Vec<&str> = words(text).collect();
    let mut set = TrigramMultiset::default();
    for w in ws.windows(3) {
        *set.entries.entry(trigram_key(w)).or_insert(0) += 1;
        set.total += 1;
    }
    set
}

/// `|tri(s1) ∩ tri(s2)| >= |tri(s1)| / 2`. True whenever `tri(s1)` is empty.
pub fn is_duplicate(s1: &str, s2: &str) -> bool {
    trigram_multiset(s1).duplicates(&trigram_multiset(s2))
}

/// One dropped sample and the kept sample it duplicated.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DedupDecision {
    pub dropped_id: u64,
    pub kept_id_that_matched: u64,
}

#[derive(Debug, Clone, Default)]
pub struct DedupOutcome {
    /// Indices into the input, in input order.
    pub kept: Vec<usize>,
    pub log: Vec<DedupDecision>,
}

/// Greedy rank-order scan: keep an item iff it is not a duplicate of any
/// item already kept. Stops once `limit` items are kept.
///
/// `items` yields `(sample_id, text)` in rank order, best first.
pub fn dedup_ranked<'a, I>(items: I, limit: Option<usize>) -> DedupOutcome
where
    I: IntoIterator<Item = (u64, &'a str)>,
{
    let limit = limit.unwrap_or(usize::MAX);
    let mut out = DedupOutcome::default();
    let mut kept_ids: Vec<u64> = Vec::new();
    let mut kept_sets: Vec<TrigramMultiset> = Vec::new();
    // trigram -> (kept slot, multiplicity)
    let mut postings: HashMap<String, Vec<(u32, u32)>> = HashMap::new();
    let mut overlap: Vec<u32> = Vec::new();
    let mut touched: Vec<u32> = Vec::new();

    for (index, (sample_id, text)) in items.into_iter().enumerate() {
        if out.kept.len() >= limit {
            break;
        }
        let tri = trigram_multiset(text);
        let matched = if kept_sets.is_empty() {
            None
        } else if tri.is_empty() {
            Some(0)
        } else {
            touched.clear();
            for (key, m) in tri.iter() {
                if let Some(list) = postings.get(key) {
                    for &(slot, km) in list {
                        if overlap[slot as usize] == 0 {
                            touched.push(slot);
                        }
                        overlap[slot as usize] += m.min(km);
                    }
                }
            }
            touched.sort_unstable();
            let hit = touched
                .iter()
                .copied()
                .find(|&slot| 2 * overlap[slot as usize] >= tri.total());
            for &slot in &touched {
                overlap[slot as usize] = 0;
            }
            hit.map(|s| s as usize)
        };
        match matched {
            Some(slot) => out.log.push(DedupDecision {
                dropped_id: sample_id,
                kept_id_that_matched: kept_ids[slot],
            }),
            None => {
                let slot = kept_sets.len() as u32;
                for (key, m) in tri.iter() {
                    postings.entry(key.to_string()).or_default().push((slot, m));
                }
                overlap.push(0);
                kept_ids.push(sample_id);
                kept_sets.push(tri);
                out.kept.push(index);
            }
        }
    }
    out
}
