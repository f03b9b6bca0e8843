//! Character-level n-gram language model with add-k smoothing.
//!
//! The model order is the capacity knob: an order-`n` model conditions on
//! the previous `n - 1` characters, so only contexts at least as long as a
//! secret's distinguishing prefix can carry it. Every document restarts
//! from a BOS-padded context; documents are never concatenated.
//!
//! ```text
//! p(c | ctx) = (count(ctx, c) + k) / (total(ctx) + k * |V|)
//! ```
//!
//! where `|V|` is the number of emittable characters (BOS excluded), so the
//! distribution over emittable characters sums to one in every context.

use std::collections::BTreeSet;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use rustc_hash::FxHashMap;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ground_truth::Corpus;
use crate::lm::{Candidate, LanguageModel, ModelKind, NextTokenDistribution, SequenceScore, Token, Vocabulary};

pub const MAX_ORDER: usize = 16;
pub const DEFAULT_SMOOTHING_K: f64 = 0.01;

const BOS_TEXT: &str = "<bos>";
const MODEL_MAGIC: &[u8; 8] = b"MAUDITLM";
const MODEL_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainingConfig {
    pub order: usize,
    #[serde(default = "default_k")]
    pub smoothing_k: f64,
    #[serde(default)]
    pub corpus_path: Option<PathBuf>,
    pub model_id: String,
}

fn default_k() -> f64 {
    DEFAULT_SMOOTHING_K
}

impl TrainingConfig {
    pub fn new(order: usize, model_id: impl Into<String>) -> Self {
        TrainingConfig {
            order,
            smoothing_k: DEFAULT_SMOOTHING_K,
            corpus_path: None,
            model_id: model_id.into(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(1..=MAX_ORDER).contains(&self.order) {
            return Err(Error::OrderOutOfRange(self.order));
        }
        if !(self.smoothing_k > 0.0 && self.smoothing_k.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "smoothing_k must be positive, got {}",
                self.smoothing_k
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
struct ContextStats {
    total: u64,
    /// Sorted by id, for point lookups.
    by_id: Vec<(u32, u64)>,
    /// Sorted by count descending, then id ascending.
    ranked: Vec<(u32, u64)>,
}

impl ContextStats {
    fn from_counts(counts: FxHashMap<u32, u64>) -> Self {
        let mut by_id: Vec<(u32, u64)> = counts.into_iter().collect();
        by_id.sort_unstable();
        let mut ranked = by_id.clone();
        ranked.sort_unstable_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));
        let total = by_id.iter().map(|(_, c)| c).sum();
        ContextStats {
            total,
            by_id,
            ranked,
        }
    }

    fn count(&self, id: u32) -> u64 {
        self.by_id
            .binary_search_by_key(&id, |(i, _)| *i)
            .map(|pos| self.by_id[pos].1)
            .unwrap_or(0)
    }
}

/// A trained, immutable character n-gram model.
#[derive(Debug, Clone)]
pub struct NgramModel {
    model_id: String,
    order: usize,
    smoothing_k: f64,
    vocab: Vocabulary,
    char_ids: FxHashMap<char, u32>,
    contexts: FxHashMap<Box<[u32]>, ContextStats>,
}

#[derive(Serialize, Deserialize)]
struct ModelFile {
    format_version: u32,
    model_id: String,
    order: u32,
    smoothing_k: f64,
    /// Emittable characters in id order; BOS is implicit and takes the next id.
    vocabulary: Vec<char>,
    /// `(context ids, next id, count)`, sorted.
    counts: Vec<(Vec<u32>, u32, u64)>,
}

/// Trains a model over every document of `corpus`.
///
/// The vocabulary is the set of observed characters closed under lowercase
/// mapping, so a lowercased sample can always be re-scored.
pub fn train(config: &TrainingConfig, corpus: &Corpus) -> Result<NgramModel> {
    config.validate()?;
    if corpus.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let mut chars = BTreeSet::new();
    for doc in corpus.documents() {
        for c in doc.text.chars() {
            chars.insert(c);
            chars.extend(c.to_lowercase());
        }
    }
    let alphabet: Vec<char> = chars.into_iter().collect();
    if alphabet.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let mut model = NgramModel::empty(config, alphabet)?;

    let ctx_len = config.order - 1;
    let bos = model.vocab.bos_id();
    let mut raw: FxHashMap<Box<[u32]>, FxHashMap<u32, u64>> = FxHashMap::default();
    let mut window: Vec<u32> = Vec::new();
    for doc in corpus.documents() {
        window.clear();
        window.resize(ctx_len, bos);
        for c in doc.text.chars() {
            let id = model.char_ids[&c];
            let counts = match raw.get_mut(&window[..]) {
                Some(counts) => counts,
                None => raw.entry(window.clone().into_boxed_slice()).or_default(),
            };
            *counts.entry(id).or_insert(0) += 1;
            if ctx_len > 0 {
                window.remove(0);
                window.push(id);
            }
        }
    }
    model.contexts = raw
        .into_iter()
        .map(|(ctx, counts)| (ctx, ContextStats::from_counts(counts)))
        .collect();
    Ok(model)
}

impl NgramModel {
    fn empty(config: &TrainingConfig, alphabet: Vec<char>) -> Result<Self> {
        let mut entries: Vec<String> = alphabet.iter().map(|c| c.to_string()).collect();
        entries.push(BOS_TEXT.to_string());
        let bos = alphabet.len() as u32;
        let vocab = Vocabulary::new(entries, bos)?;
        let char_ids = alphabet
            .iter()
            .enumerate()
            .map(|(i, c)| (*c, i as u32))
            .collect();
        Ok(NgramModel {
            model_id: config.model_id.clone(),
            order: config.order,
            smoothing_k: config.smoothing_k,
            vocab,
            char_ids,
            contexts: FxHashMap::default(),
        })
    }

    pub fn order(&self) -> usize {
        self.order
    }

    pub fn smoothing_k(&self) -> f64 {
        self.smoothing_k
    }

    pub fn vocab(&self) -> &Vocabulary {
        &self.vocab
    }

    /// Number of emittable characters, the `|V|` of the smoothing formula.
    pub fn alphabet_size(&self) -> usize {
        self.vocab.emittable()
    }

    pub fn context_count(&self) -> usize {
        self.contexts.len()
    }

    /// Raw count of `next` after `context`, where `context` is truncated /
    /// BOS-padded like [`NgramModel::prob`].
    pub fn count(&self, context: &str, next: char) -> u64 {
        let Some(&id) = self.char_ids.get(&next) else {
            return 0;
        };
        let mut buf = [0u32; MAX_ORDER];
        self.context_from_text(context, &mut buf)
            .and_then(|ctx| self.contexts.get(ctx))
            .map_or(0, |s| s.count(id))
    }

    /// `p(next | context)`. The context is truncated to its last `order - 1`
    /// characters and BOS-padded when shorter. Contexts never seen in
    /// training (including ones with out-of-vocabulary characters) get the
    /// uniform value `1 / |V|`.
    pub fn prob(&self, context: &str, next: char) -> Result<f64> {
        let id = *self
            .char_ids
            .get(&next)
            .ok_or_else(|| Error::UnknownToken(format!("{next:?}")))?;
        let mut buf = [0u32; MAX_ORDER];
        let stats = self
            .context_from_text(context, &mut buf)
            .and_then(|ctx| self.contexts.get(ctx));
        Ok(self.smoothed(stats, id))
    }

    fn smoothed(&self, stats: Option<&ContextStats>, id: u32) -> f64 {
        let (count, total) = stats.map_or((0, 0), |s| (s.count(id), s.total));
        self.smoothed_counts(count, total)
    }

    #[inline]
    fn smoothed_counts(&self, count: u64, total: u64) -> f64 {
        let k = self.smoothing_k;
        (count as f64 + k) / (total as f64 + k * self.alphabet_size() as f64)
    }

    /// Writes the last `order - 1` ids of `context` into `buf`, BOS-padded.
    /// Returns `None` when the context contains an out-of-vocabulary char.
    fn context_from_text<'b>(&self, context: &str, buf: &'b mut [u32; MAX_ORDER]) -> Option<&'b [u32]> {
        let n = self.order - 1;
        let bos = self.vocab.bos_id();
        buf[..n].fill(bos);
        for (slot, c) in (0..n).rev().zip(context.chars().rev()) {
            buf[slot] = *self.char_ids.get(&c)?;
        }
        Some(&buf[..n])
    }

    fn context_from_ids<'b>(&self, prefix: &[u32], buf: &'b mut [u32; MAX_ORDER]) -> &'b [u32] {
        let n = self.order - 1;
        buf[..n].fill(self.vocab.bos_id());
        let take = prefix.len().min(n);
        buf[n - take..n].copy_from_slice(&prefix[prefix.len() - take..]);
        &buf[..n]
    }

    fn ids_of_text(&self, text: &str) -> Result<Vec<u32>> {
        text.chars()
            .map(|c| {
                self.char_ids
                    .get(&c)
                    .copied()
                    .ok_or_else(|| Error::UnknownToken(format!("{c:?}")))
            })
            .collect()
    }

    fn check_ids(&self, tokens: &[Token]) -> Result<Vec<u32>> {
        tokens
            .iter()
            .map(|t| {
                if t.id < self.vocab.bos_id() {
                    Ok(t.id)
                } else {
                    Err(Error::UnknownToken(format!("id {}", t.id)))
                }
            })
            .collect()
    }

    fn score_ids(&self, ids: &[u32]) -> Result<SequenceScore> {
        let n = self.order - 1;
        let mut padded = vec![self.vocab.bos_id(); n];
        padded.extend_from_slice(ids);
        let logprobs = ids
            .iter()
            .enumerate()
            .map(|(i, &id)| self.smoothed(self.contexts.get(&padded[i..i + n]), id).ln())
            .collect();
        SequenceScore::new(logprobs)
    }

    fn top_k_context(&self, ctx: Option<&[u32]>, k: usize) -> Result<NextTokenDistribution> {
        if k == 0 {
            return Err(Error::InvalidArgument("k must be >= 1".into()));
        }
        let truncation = k.min(self.alphabet_size());
        let stats = ctx.and_then(|c| self.contexts.get(c));
        let total = stats.map_or(0, |s| s.total);
        let mut candidates = Vec::with_capacity(truncation);
        if let Some(stats) = stats {
            for &(id, count) in stats.ranked.iter().take(truncation) {
                candidates.push(Candidate {
                    token: Token {
                        id,
                        text: self.vocab.shared_text(id),
                    },
                    logprob: self.smoothed_counts(count, total).ln(),
                });
            }
        }
        if candidates.len() < truncation {
            let unseen = self.smoothed_counts(0, total).ln();
            let seen = stats.map(|s| &s.by_id[..]).unwrap_or(&[]);
            let mut seen_iter = seen.iter().map(|(i, _)| *i).peekable();
            for id in 0..self.alphabet_size() as u32 {
                if candidates.len() == truncation {
                    break;
                }
                while seen_iter.peek().is_some_and(|s| *s < id) {
                    seen_iter.next();
                }
                if seen_iter.peek() == Some(&id) {
                    continue;
                }
                candidates.push(Candidate {
                    token: Token {
                        id,
                        text: self.vocab.shared_text(id),
                    },
                    logprob: unseen,
                });
            }
        }
        Ok(NextTokenDistribution {
            candidates,
            truncation,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let bytes = self.to_bytes()?;
        crate::pipeline::io::write_atomic(path, &bytes)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        let mut bytes = Vec::new();
        BufReader::new(file)
            .read_to_end(&mut bytes)
            .map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    /// Canonical encoding: identical models produce identical bytes.
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut counts: Vec<(Vec<u32>, u32, u64)> = self
            .contexts
            .iter()
            .flat_map(|(ctx, stats)| {
                stats
                    .by_id
                    .iter()
                    .map(move |&(id, c)| (ctx.to_vec(), id, c))
            })
            .collect();
        counts.sort_unstable();
        let file = ModelFile {
            format_version: MODEL_FORMAT_VERSION,
            model_id: self.model_id.clone(),
            order: self.order as u32,
            smoothing_k: self.smoothing_k,
            vocabulary: self
                .vocab
                .entries()
                .take(self.alphabet_size())
                .map(|s| s.chars().next().expect("non-empty"))
                .collect(),
            counts,
        };
        let mut out = BufWriter::new(Vec::new());
        out.write_all(MODEL_MAGIC).expect("in-memory write");
        bincode::serialize_into(&mut out, &file)?;
        Ok(out.into_inner().expect("in-memory flush"))
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let body = bytes
            .strip_prefix(MODEL_MAGIC.as_slice())
            .ok_or_else(|| Error::Format("not a reference model file".into()))?;
        let file: ModelFile = bincode::deserialize(body)?;
        if file.format_version != MODEL_FORMAT_VERSION {
            return Err(Error::Format(format!(
                "model format version {} (expected {MODEL_FORMAT_VERSION})",
                file.format_version
            )));
        }
        let config = TrainingConfig {
            order: file.order as usize,
            smoothing_k: file.smoothing_k,
            corpus_path: None,
            model_id: file.model_id,
        };
        config.validate()?;
        let mut model = NgramModel::empty(&config, file.vocabulary)?;
        let ctx_len = model.order - 1;
        let mut raw: FxHashMap<Box<[u32]>, FxHashMap<u32, u64>> = FxHashMap::default();
        for (ctx, id, count) in file.counts {
            if ctx.len() != ctx_len
                || id >= model.vocab.bos_id()
                || ctx.iter().any(|c| *c > model.vocab.bos_id())
            {
                return Err(Error::Format("count entry out of range".into()));
            }
            raw.entry(ctx.into_boxed_slice()).or_default().insert(id, count);
        }
        model.contexts = raw
            .into_iter()
            .map(|(ctx, counts)| (ctx, ContextStats::from_counts(counts)))
            .collect();
        Ok(model)
    }
}

impl LanguageModel for NgramModel {
    fn model_id(&self) -> &str {
        &self.model_id
    }

    fn kind(&self) -> ModelKind {
        ModelKind::Reference
    }

    fn vocabulary(&self) -> Option<&Vocabulary> {
        Some(&self.vocab)
    }

    fn tokenize(&self, text: &str) -> Result<Vec<Token>> {
        Ok(self
            .ids_of_text(text)?
            .into_iter()
            .map(|id| Token {
                id,
                text: self.vocab.shared_text(id),
            })
            .collect())
    }

    fn score_sequence(&self, tokens: &[Token]) -> Result<SequenceScore> {
        let ids = self.check_ids(tokens)?;
        self.score_ids(&ids)
    }

    fn top_k(&self, prefix: &[Token], k: usize) -> Result<NextTokenDistribution> {
        let ids = self.check_ids(prefix)?;
        let mut buf = [0u32; MAX_ORDER];
        let ctx = self.context_from_ids(&ids, &mut buf);
        self.top_k_context(Some(ctx), k)
    }

    fn score_text(&self, text: &str) -> Result<(Vec<Token>, SequenceScore)> {
        let ids = self.ids_of_text(text)?;
        let score = self.score_ids(&ids)?;
        let tokens = ids
            .into_iter()
            .map(|id| Token {
                id,
                text: self.vocab.shared_text(id),
            })
            .collect();
        Ok((tokens, score))
    }

    /// Only the last `order - 1` characters of the prefix are read; a prefix
    /// with out-of-vocabulary characters there behaves like an unseen context.
    fn top_k_text(&self, prefix: &str, k: usize) -> Result<NextTokenDistribution> {
        let mut buf = [0u32; MAX_ORDER];
        let ctx = self.context_from_text(prefix, &mut buf);
        self.top_k_context(ctx, k)
    }
}
