//! Aggregation of labeled candidates into the strategy × metric summary.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write;

use serde::{Deserialize, Serialize};

use crate::dedup::dedup_ranked;
use crate::generation::Strategy;
use crate::metrics::MetricKind;
use crate::pipeline::labels::{Category, Verdict};
use crate::pipeline::select::CandidateRecord;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CellCount {
    pub labeled: usize,
    pub memorized: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    /// Keyed by `(strategy, metric)`.
    pub cells: BTreeMap<Strategy, BTreeMap<MetricKind, CellCount>>,
    /// Memorized samples per strategy after cross-metric de-duplication.
    pub strategy_unique: BTreeMap<Strategy, usize>,
    /// Memorized samples across all strategies after de-duplication.
    pub overall_unique: usize,
    pub categories: BTreeMap<Category, usize>,
    pub labeled: usize,
    pub confirmed: usize,
    pub unsure: usize,
    /// `confirmed / labeled`, zero when nothing is labeled.
    pub aggregate_rate: f64,
}

/// Memorized records, one per sample, de-duplicated with the trigram
/// relation. Input order decides which of two duplicates survives.
fn unique_memorized<'a>(records: impl Iterator<Item = &'a CandidateRecord>) -> Vec<&'a CandidateRecord> {
    let mut seen = BTreeSet::new();
    let firsts: Vec<&CandidateRecord> = records.filter(|r| seen.insert(r.sample_id)).collect();
    let out = dedup_ranked(firsts.iter().map(|r| (r.sample_id, r.text.as_str())), None);
    out.kept.into_iter().map(|i| firsts[i]).collect()
}

fn is_memorized(r: &CandidateRecord) -> bool {
    matches!(&r.label, Some(l) if l.verdict == Verdict::Memorized)
}

pub fn build_report(candidates: &[CandidateRecord]) -> Report {
    let mut sorted: Vec<&CandidateRecord> = candidates.iter().collect();
    sorted.sort_by_key(|r| (r.strategy, r.metric, r.rank));

    let mut cells: BTreeMap<Strategy, BTreeMap<MetricKind, CellCount>> = BTreeMap::new();
    let (mut labeled, mut confirmed, mut unsure) = (0, 0, 0);
    for r in &sorted {
        let cell = cells.entry(r.strategy).or_default().entry(r.metric).or_default();
        if let Some(l) = &r.label {
            cell.labeled += 1;
            labeled += 1;
            match l.verdict {
                Verdict::Memorized => {
                    cell.memorized += 1;
                    confirmed += 1;
                }
                Verdict::Unsure => unsure += 1,
                Verdict::NotMemorized => {}
            }
        }
    }

    let memorized: Vec<&CandidateRecord> = sorted.iter().copied().filter(|r| is_memorized(r)).collect();
    let strategy_unique = cells
        .keys()
        .map(|&s| (s, unique_memorized(memorized.iter().copied().filter(|r| r.strategy == s)).len()))
        .collect();
    let overall = unique_memorized(memorized.iter().copied());

    let mut categories: BTreeMap<Category, usize> = BTreeMap::new();
    for kept in &overall {
        let cats: BTreeSet<Category> = memorized
            .iter()
            .filter(|r| r.sample_id == kept.sample_id)
            .flat_map(|r| r.label.as_ref().map(|l| l.categories.iter().copied()).into_iter().flatten())
            .collect();
        for c in cats {
            *categories.entry(c).or_default() += 1;
        }
    }

    Report {
        cells,
        strategy_unique,
        overall_unique: overall.len(),
        categories,
        labeled,
        confirmed,
        unsure,
        aggregate_rate: if labeled == 0 {
            0.0
        } else {
            confirmed as f64 / labeled as f64
        },
    }
}

impl Report {
    pub fn to_markdown(&self) -> String {
        let strategies: Vec<Strategy> = self.cells.keys().copied().collect();
        let metrics: BTreeSet<MetricKind> = self.cells.values().flat_map(|m| m.keys().copied()).collect();
        let mut s = String::new();
        s.push_str("| metric |");
        for st in &strategies {
            let _ = write!(s, " {st} |");
        }
        s.push_str("\n|---|");
        s.push_str(&"---|".repeat(strategies.len()));
        s.push('\n');
        for m in &metrics {
            let _ = write!(s, "| {m} |");
            for st in &strategies {
                match self.cells[st].get(m) {
                    Some(c) => {
                        let _ = write!(s, " {}/{} |", c.memorized, c.labeled);
                    }
                    None => s.push_str(" - |"),
                }
            }
            s.push('\n');
        }
        s.push_str("| **unique** |");
        for st in &strategies {
            let _ = write!(s, " {} |", self.strategy_unique.get(st).copied().unwrap_or(0));
        }
        let _ = write!(
            s,
            "\n\nUnique memorized samples across strategies: {}\n\nConfirmed {} of {} labeled candidates (rate {:.3}); {} unsure.\n",
            self.overall_unique, self.confirmed, self.labeled, self.aggregate_rate, self.unsure
        );
        if !self.categories.is_empty() {
            s.push_str("\n| category | count |\n|---|---|\n");
            let mut rows: Vec<(&Category, &usize)> = self.categories.iter().collect();
            rows.sort_by(|a, b| b.1.cmp(a.1).then(a.0.cmp(b.0)));
            for (c, n) in rows {
                let name = if c.is_pii() {
                    format!("**{}**", c.description())
                } else {
                    c.description().to_string()
                };
                let _ = writeln!(s, "| {name} | {n} |");
            }
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pipeline::labels::Label;

    fn rec(strategy: Strategy, metric: MetricKind, rank: usize, id: u64, text: &str, verdict: Option<Verdict>) -> CandidateRecord {
        CandidateRecord {
            candidate_id: format!("{strategy}-{metric}-{rank}"),
            strategy,
            metric,
            rank,
            sample_id: id,
            value: 0.0,
            text: text.into(),
            full_text_ref: String::new(),
            label: verdict.map(|v| Label {
                verdict: v,
                categories: [Category::Code].into_iter().collect(),
                notes: String::new(),
            }),
        }
    }

    #[test]
    fn counts_and_unique_totals() {
        use MetricKind::*;
        use Strategy::*;
        let m = Some(Verdict::Memorized);
        let recs = vec![
            rec(TopN, Perplexity, 1, 1, "alpha beta gamma delta", m),
            rec(TopN, CompressionRatio, 1, 1, "alpha beta gamma delta", m),
            rec(TopN, CompressionRatio, 2, 2, "alpha beta gamma delta epsilon", m),
            rec(TopN, SmallRatio, 1, 3, "one two three four", Some(Verdict::NotMemorized)),
            rec(TopN, SmallRatio, 2, 4, "unlabeled words here ok", None),
            rec(DecayedTemperature, Perplexity, 1, 5, "zeta eta theta iota", m),
            rec(DecayedTemperature, Perplexity, 2, 6, "one two three", Some(Verdict::Unsure)),
        ];
        let r = build_report(&recs);
        assert_eq!(r.cells[&TopN][&CompressionRatio], CellCount { labeled: 2, memorized: 2 });
        assert_eq!(r.cells[&TopN][&SmallRatio], CellCount { labeled: 1, memorized: 0 });
        // Sample 2 shares 2 of its 3 trigrams with sample 1.
        assert_eq!(r.strategy_unique[&TopN], 1);
        assert_eq!(r.strategy_unique[&DecayedTemperature], 1);
        assert_eq!(r.overall_unique, 2);
        assert_eq!(r.labeled, 6);
        assert_eq!(r.confirmed, 4);
        assert_eq!(r.unsure, 1);
        assert!((r.aggregate_rate - 4.0 / 6.0).abs() < 1e-12);
        assert_eq!(r.categories[&Category::Code], 2);
        let md = r.to_markdown();
        assert!(md.contains("| zlib | 2/2 | - |"), "{md}");
    }

    #[test]
    fn empty_report() {
        let r = build_report(&[]);
        assert_eq!(r.aggregate_rate, 0.0);
        assert_eq!(r.overall_unique, 0);
    }
}
