//! Membership-inference metrics. Lower values mean more likely memorized
//! for every metric.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::io::Write;
use std::str::FromStr;

use flate2::write::ZlibEncoder;
use flate2::Compression;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::generation::GeneratedSample;
use crate::lm::{LanguageModel, SequenceScore};

/// Floor applied to ratio denominators.
pub const RATIO_EPSILON: f64 = 1e-6;
pub const DEFAULT_WINDOW: usize = 50;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum MetricKind {
    #[serde(rename = "perplexity")]
    Perplexity,
    #[serde(rename = "small")]
    SmallRatio,
    #[serde(rename = "medium")]
    MediumRatio,
    #[serde(rename = "zlib")]
    CompressionRatio,
    #[serde(rename = "lowercase")]
    LowercaseRatio,
    #[serde(rename = "window")]
    WindowMin,
}

impl MetricKind {
    pub const ALL: [MetricKind; 6] = [
        MetricKind::Perplexity,
        MetricKind::SmallRatio,
        MetricKind::MediumRatio,
        MetricKind::CompressionRatio,
        MetricKind::LowercaseRatio,
        MetricKind::WindowMin,
    ];

    pub fn name(self) -> &'static str {
        match self {
            MetricKind::Perplexity => "perplexity",
            MetricKind::SmallRatio => "small",
            MetricKind::MediumRatio => "medium",
            MetricKind::CompressionRatio => "zlib",
            MetricKind::LowercaseRatio => "lowercase",
            MetricKind::WindowMin => "window",
        }
    }
}

impl fmt::Display for MetricKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for MetricKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        MetricKind::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown metric {s:?}")))
    }
}

/// `exp(-mean logprob)`.
pub fn perplexity(score: &SequenceScore) -> Result<f64> {
    if score.is_empty() {
        return Err(Error::EmptyScore);
    }
    let lps = score.token_logprobs();
    Ok((-lps.iter().sum::<f64>() / lps.len() as f64).exp())
}

/// Minimum perplexity over all contiguous windows of `window` tokens
/// (stride 1). Sequences shorter than the window get their full perplexity.
pub fn window_min_perplexity(score: &SequenceScore, window: usize) -> Result<f64> {
    if window == 0 {
        return Err(Error::InvalidArgument("window must be >= 1".into()));
    }
    let lps = score.token_logprobs();
    if lps.len() <= window {
        return perplexity(score);
    }
    let mut sum: f64 = lps[..window].iter().sum();
    let mut best = (sum, 0);
    for start in 1..=lps.len() - window {
        sum += lps[start + window - 1] - lps[start - 1];
        if sum > best.0 {
            best = (sum, start);
        }
    }
    // Re-add the winning window directly so drift from the running sum does
    // not leak into the result.
    let exact: f64 = lps[best.1..best.1 + window].iter().sum();
    Ok((-exact / window as f64).exp())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CompressionStats {
    pub original_bytes: usize,
    pub compressed_bytes: usize,
    /// Eight times the compressed length.
    pub entropy_bits: f64,
}

/// zlib stream (level 9, with header and checksum) of the UTF-8 bytes.
pub fn compression_entropy_bits(text: &str) -> CompressionStats {
    let mut enc = ZlibEncoder::new(Vec::new(), Compression::best());
    enc.write_all(text.as_bytes()).expect("writing to a Vec cannot fail");
    let compressed = enc.finish().expect("writing to a Vec cannot fail");
    CompressionStats {
        original_bytes: text.len(),
        compressed_bytes: compressed.len(),
        entropy_bits: 8.0 * compressed.len() as f64,
    }
}

/// The models a metric computation may consult.
#[derive(Clone, Copy)]
pub struct MetricModels<'a> {
    pub target: &'a dyn LanguageModel,
    pub small: Option<&'a dyn LanguageModel>,
    pub medium: Option<&'a dyn LanguageModel>,
}

impl<'a> MetricModels<'a> {
    pub fn target_only(target: &'a dyn LanguageModel) -> Self {
        MetricModels {
            target,
            small: None,
            medium: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricScore {
    pub sample_id: u64,
    pub kind: MetricKind,
    pub value: f64,
    /// Intermediate quantities, e.g. `target_perplexity`.
    pub aux: BTreeMap<String, f64>,
}

/// All requested metrics for one text, plus their intermediates.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TextScores {
    pub scores: BTreeMap<MetricKind, f64>,
    pub aux: BTreeMap<String, f64>,
}

fn text_perplexity(model: &dyn LanguageModel, text: &str) -> Result<(f64, SequenceScore)> {
    let (_, score) = model.score_text(text)?;
    Ok((perplexity(&score)?, score))
}

/// Computes each kind in `kinds`, scoring the text with the target model once.
pub fn score_text_metrics(text: &str, kinds: &[MetricKind], models: MetricModels<'_>) -> Result<TextScores> {
    let (ppl, score) = text_perplexity(models.target, text)?;
    let mut out = TextScores::default();
    out.aux.insert("target_perplexity".into(), ppl);
    let ln_ppl = ppl.ln();
    for &kind in kinds {
        let value = match kind {
            MetricKind::Perplexity => ppl,
            MetricKind::SmallRatio | MetricKind::MediumRatio => {
                let (model, key) = if kind == MetricKind::SmallRatio {
                    (models.small, "small")
                } else {
                    (models.medium, "medium")
                };
                let model = model.ok_or(Error::MissingReferenceModel(key))?;
                let (ref_ppl, _) = text_perplexity(model, text)?;
                out.aux.insert(format!("{key}_perplexity"), ref_ppl);
                ln_ppl / ref_ppl.ln().max(RATIO_EPSILON)
            }
            MetricKind::CompressionRatio => {
                let stats = compression_entropy_bits(text);
                out.aux.insert("zlib_entropy_bits".into(), stats.entropy_bits);
                ln_ppl / stats.entropy_bits
            }
            MetricKind::LowercaseRatio => {
                let (lower_ppl, _) = text_perplexity(models.target, &text.to_lowercase())?;
                out.aux.insert("lowercase_perplexity".into(), lower_ppl);
                ppl / lower_ppl.max(RATIO_EPSILON)
            }
            MetricKind::WindowMin => {
                let w = window_min_perplexity(&score, DEFAULT_WINDOW)?;
                out.aux.insert("window_perplexity".into(), w);
                w
            }
        };
        out.scores.insert(kind, value);
    }
    Ok(out)
}

pub fn metric_score(sample: &GeneratedSample, kind: MetricKind, models: MetricModels<'_>) -> Result<MetricScore> {
    let s = score_text_metrics(&sample.text, &[kind], models)?;
    Ok(MetricScore {
        sample_id: sample.sample_id,
        kind,
        value: s.scores[&kind],
        aux: s.aux,
    })
}

/// A sample with its metric values, as persisted in the scored JSONL.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredSample {
    #[serde(flatten)]
    pub sample: GeneratedSample,
    pub scores: BTreeMap<MetricKind, f64>,
    pub aux: BTreeMap<String, f64>,
}

/// Scores every sample on the current rayon pool; output order matches input.
pub fn score_samples(
    samples: Vec<GeneratedSample>,
    kinds: &[MetricKind],
    models: MetricModels<'_>,
) -> Result<Vec<ScoredSample>> {
    samples
        .into_par_iter()
        .map(|sample| {
            let s = score_text_metrics(&sample.text, kinds, models)?;
            Ok(ScoredSample {
                sample,
                scores: s.scores,
                aux: s.aux,
            })
        })
        .collect()
}

/// Sort order used for ranking: ascending metric value, then sample id.
pub fn rank_by(samples: &[ScoredSample], kind: MetricKind) -> Result<Vec<usize>> {
    let mut keyed = Vec::with_capacity(samples.len());
    for (i, s) in samples.iter().enumerate() {
        let v = *s.scores.get(&kind).ok_or_else(|| {
            Error::InvalidArgument(format!("sample {} has no {kind} score", s.sample.sample_id))
        })?;
        keyed.push((v, s.sample.sample_id, i));
    }
    keyed.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    Ok(keyed.into_iter().map(|(_, _, i)| i).collect())
}

/// A scatter-plot axis: a metric value or a raw intermediate.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Axis {
    Metric(MetricKind),
    Aux(String),
}

impl FromStr for Axis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s.parse::<MetricKind>() {
            Ok(m) => Axis::Metric(m),
            Err(_) => Axis::Aux(s.to_string()),
        })
    }
}

impl Axis {
    fn label(&self) -> &str {
        match self {
            Axis::Metric(m) => m.name(),
            Axis::Aux(k) => k,
        }
    }

    fn value(&self, s: &ScoredSample) -> Result<f64> {
        let v = match self {
            Axis::Metric(m) => s.scores.get(m),
            Axis::Aux(k) => s.aux.get(k),
        };
        v.copied().ok_or_else(|| {
            Error::InvalidArgument(format!(
                "sample {} has no value for axis {}",
                s.sample.sample_id,
                self.label()
            ))
        })
    }
}

/// Tab-separated `sample_id, x, y, selected, memorized` rows for plotting
/// one quantity against another.
pub fn export_scatter(
    samples: &[ScoredSample],
    x: &Axis,
    y: &Axis,
    selected: &BTreeSet<u64>,
    memorized: &BTreeSet<u64>,
) -> Result<String> {
    let mut out = format!("sample_id\t{}\t{}\tselected\tmemorized\n", x.label(), y.label());
    for s in samples {
        let id = s.sample.sample_id;
        out.push_str(&format!(
            "{id}\t{}\t{}\t{}\t{}\n",
            x.value(s)?,
            y.value(s)?,
            u8::from(selected.contains(&id)),
            u8::from(memorized.contains(&id)),
        ));
    }
    Ok(out)
}
