//! Square-root-spaced selection of candidates from a ranked, de-duplicated pool.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::generation::Strategy;
use crate::metrics::MetricKind;
use crate::pipeline::io::write_atomic;
use crate::pipeline::labels::Label;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct SelectionPlan {
    /// How many de-duplicated samples form the pool.
    pub pool_size: usize,
    /// How many candidates to draw from it.
    pub pick: usize,
}

impl Default for SelectionPlan {
    fn default() -> Self {
        SelectionPlan {
            pool_size: 1000,
            pick: 100,
        }
    }
}

/// 1-based pool ranks for picks `i = 1..=pick`: `ceil(n * i^2 / pick^2)`,
/// advanced to the next unused rank on collision. So the fraction `k / n`
/// of the pool is sampled with density growing like `sqrt(k / n)`.
pub fn rank_schedule(n: usize, pick: usize) -> Result<Vec<usize>> {
    if pick == 0 {
        return Err(Error::InvalidArgument("pick must be >= 1".into()));
    }
    if n < pick {
        return Err(Error::PoolTooSmall { available: n, pick });
    }
    let (n, p2) = (n as u128, (pick as u128) * (pick as u128));
    let mut ranks = Vec::with_capacity(pick);
    let mut prev = 0u128;
    for i in 1..=pick as u128 {
        let target = (n * i * i).div_ceil(p2);
        let rank = target.max(prev + 1);
        debug_assert!(rank <= n);
        ranks.push(rank as usize);
        prev = rank;
    }
    Ok(ranks)
}

/// One ranked entry of a de-duplicated pool.
#[derive(Debug, Clone, PartialEq)]
pub struct PoolEntry<'a> {
    pub sample_id: u64,
    pub value: f64,
    pub text: &'a str,
}

/// A sample chosen for inspection.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateRecord {
    pub candidate_id: String,
    pub strategy: Strategy,
    pub metric: MetricKind,
    /// 1-based position in the de-duplicated pool.
    pub rank: usize,
    pub sample_id: u64,
    pub value: f64,
    pub text: String,
    pub full_text_ref: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<Label>,
}

pub fn candidate_id(strategy: Strategy, metric: MetricKind, rank: usize) -> String {
    format!("{strategy}-{metric}-{rank:04}")
}

/// Applies the rank schedule to `pool` (best first).
pub fn select_candidates(
    pool: &[PoolEntry<'_>],
    plan: SelectionPlan,
    strategy: Strategy,
    metric: MetricKind,
    full_text_ref: impl Fn(u64) -> String,
) -> Result<Vec<CandidateRecord>> {
    let n = pool.len().min(plan.pool_size);
    let ranks = rank_schedule(n, plan.pick)?;
    Ok(ranks
        .into_iter()
        .map(|rank| {
            let e = &pool[rank - 1];
            CandidateRecord {
                candidate_id: candidate_id(strategy, metric, rank),
                strategy,
                metric,
                rank,
                sample_id: e.sample_id,
                value: e.value,
                text: e.text.to_string(),
                full_text_ref: full_text_ref(e.sample_id),
                label: None,
            }
        })
        .collect())
}

pub const SNIPPET_CHARS: usize = 256;

#[derive(Debug, Serialize, Deserialize)]
struct CsvRow {
    candidate_id: String,
    strategy: Strategy,
    metric: MetricKind,
    rank: usize,
    value: f64,
    text_snippet_256chars: String,
    full_text_ref: String,
}

pub fn candidates_csv(records: &[CandidateRecord]) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in records {
        w.serialize(CsvRow {
            candidate_id: r.candidate_id.clone(),
            strategy: r.strategy,
            metric: r.metric,
            rank: r.rank,
            value: r.value,
            text_snippet_256chars: r.text.chars().take(SNIPPET_CHARS).collect(),
            full_text_ref: r.full_text_ref.clone(),
        })?;
    }
    w.into_inner()
        .map_err(|e| Error::Format(format!("csv flush: {}", e.error())))
}

pub fn write_candidates_csv(path: impl AsRef<Path>, records: &[CandidateRecord]) -> Result<()> {
    write_atomic(path, &candidates_csv(records)?)
}
