//! Sample generation: top-n sampling, decaying-temperature sampling,
//! prefix-conditioned sampling, and beam-search extension.
//!
//! Every sample draws from its own ChaCha8 stream seeded from
//! `(master_seed, sample_id)`, so batches are reproducible regardless of how
//! work is scheduled across threads.

use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::de::{self, Deserializer};
use serde::ser::{SerializeStruct, Serializer};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lm::{Candidate, LanguageModel, NextTokenDistribution};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    TopN,
    DecayedTemperature,
    PrefixConditioned,
}

impl Strategy {
    pub const ALL: [Strategy; 3] = [
        Strategy::TopN,
        Strategy::DecayedTemperature,
        Strategy::PrefixConditioned,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Strategy::TopN => "top_n",
            Strategy::DecayedTemperature => "decayed_temperature",
            Strategy::PrefixConditioned => "prefix_conditioned",
        }
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Strategy::ALL
            .into_iter()
            .find(|st| st.name() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown strategy {s:?}")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SamplerConfig {
    pub strategy: Strategy,
    pub n: usize,
    pub max_tokens: usize,
    pub temp_start: f64,
    pub temp_end: f64,
    pub decay_tokens: usize,
    pub context_min_tokens: usize,
    pub context_max_tokens: usize,
    pub master_seed: u64,
    pub num_samples: usize,
    /// Temper the full distribution before top-n truncation instead of after.
    pub temperature_before_truncation: bool,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        SamplerConfig {
            strategy: Strategy::TopN,
            n: 40,
            max_tokens: 256,
            temp_start: 10.0,
            temp_end: 1.0,
            decay_tokens: 20,
            context_min_tokens: 5,
            context_max_tokens: 10,
            master_seed: 0,
            num_samples: 1,
            temperature_before_truncation: false,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidArgument(m.to_string()));
        if self.n == 0 {
            return bad("n must be >= 1");
        }
        if self.max_tokens == 0 {
            return bad("max_tokens must be >= 1");
        }
        if !(self.temp_start >= self.temp_end && self.temp_end >= 1.0) || !self.temp_start.is_finite() {
            return bad("temperatures must satisfy temp_start >= temp_end >= 1");
        }
        if self.decay_tokens == 0 {
            return bad("decay_tokens must be >= 1");
        }
        if self.context_min_tokens == 0 || self.context_min_tokens > self.context_max_tokens {
            return bad("context length bounds must satisfy 1 <= min <= max");
        }
        Ok(())
    }
}

/// Linear decay from `temp_start` to `temp_end` over the first
/// `decay_tokens` positions, flat afterwards.
pub fn temperature_at(config: &SamplerConfig, position: usize) -> f64 {
    let done = position.min(config.decay_tokens) as f64 / config.decay_tokens as f64;
    config.temp_start - (config.temp_start - config.temp_end) * done
}

/// `log softmax(logprobs / t)` over the given support.
pub fn tempered_logprobs(logprobs: &[f64], t: f64) -> Vec<f64> {
    let scaled: Vec<f64> = logprobs.iter().map(|lp| lp / t).collect();
    let max = scaled.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + scaled.iter().map(|z| (z - max).exp()).sum::<f64>().ln();
    scaled.into_iter().map(|z| z - lse).collect()
}

/// Divides logprobs by `t` and renormalizes over the truncated support.
/// Candidate order is unchanged.
pub fn apply_temperature(dist: &NextTokenDistribution, t: f64) -> NextTokenDistribution {
    let lps: Vec<f64> = dist.candidates.iter().map(|c| c.logprob).collect();
    let tempered = tempered_logprobs(&lps, t);
    NextTokenDistribution {
        candidates: dist
            .candidates
            .iter()
            .zip(tempered)
            .map(|(c, logprob)| Candidate {
                token: c.token.clone(),
                logprob,
            })
            .collect(),
        truncation: dist.truncation,
    }
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Per-sample seed derived from the master seed and the sample id.
pub fn derive_seed(master_seed: u64, sample_id: u64) -> u64 {
    splitmix64(master_seed ^ splitmix64(sample_id))
}

pub fn sample_rng(master_seed: u64, sample_id: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(master_seed, sample_id))
}

/// Index drawn from a distribution given as log-probabilities.
fn draw(logprobs: &[f64], rng: &mut impl Rng) -> usize {
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    for (i, lp) in logprobs.iter().enumerate() {
        acc += lp.exp();
        if u < acc {
            return i;
        }
    }
    logprobs.len() - 1
}

/// One sampling step after `text`; returns the appended token text.
fn step<'d>(
    model: &dyn LanguageModel,
    text: &str,
    n: usize,
    t: f64,
    before_truncation: bool,
    rng: &mut impl Rng,
    dist_buf: &'d mut NextTokenDistribution,
) -> Result<&'d str> {
    if before_truncation {
        *dist_buf = model.top_k_text(text, usize::MAX)?;
        let lps: Vec<f64> = dist_buf.candidates.iter().map(|c| c.logprob).collect();
        let mut tempered = tempered_logprobs(&lps, t);
        tempered.truncate(n);
        let renorm = tempered_logprobs(&tempered, 1.0);
        let i = draw(&renorm, rng);
        return Ok(&dist_buf.candidates[i].token.text);
    }
    *dist_buf = model.top_k_text(text, n)?;
    if dist_buf.is_empty() {
        return Err(Error::ModelUnavailable("model returned no candidates".into()));
    }
    let lps: Vec<f64> = dist_buf.candidates.iter().map(|c| c.logprob).collect();
    let i = draw(&tempered_logprobs(&lps, t), rng);
    Ok(&dist_buf.candidates[i].token.text)
}

/// Samples `steps` tokens after `prompt` from the top-`n` candidates at
/// temperature `t`, seeded like a pipeline sample. Returns the appended text.
pub fn sample_extension(
    model: &dyn LanguageModel,
    prompt: &str,
    n: usize,
    t: f64,
    steps: usize,
    master_seed: u64,
    sample_id: u64,
) -> Result<String> {
    let mut rng = sample_rng(master_seed, sample_id);
    let mut text = prompt.to_string();
    let mut dist = NextTokenDistribution {
        candidates: Vec::new(),
        truncation: 0,
    };
    for _ in 0..steps {
        let tok = step(model, &text, n, t, false, &mut rng, &mut dist)?;
        text.push_str(tok);
    }
    Ok(text.split_off(prompt.len()))
}

/// A generated sequence and everything needed to reproduce it.
#[derive(Debug, Clone, PartialEq)]
pub struct GeneratedSample {
    pub sample_id: u64,
    /// `prompt_text` followed by the generated tokens.
    pub text: String,
    pub strategy: SamplerConfig,
    pub prompt_text: String,
    pub model_id: String,
    pub seed: u64,
    /// Byte offsets into `text` where each generated token ends.
    token_ends: Vec<u32>,
}

impl GeneratedSample {
    pub fn token_count(&self) -> usize {
        self.token_ends.len()
    }

    /// Generated tokens, prompt excluded.
    pub fn tokens(&self) -> impl Iterator<Item = &str> + '_ {
        let mut start = self.prompt_text.len();
        self.token_ends.iter().map(move |&end| {
            let tok = &self.text[start..end as usize];
            start = end as usize;
            tok
        })
    }

    pub fn generated_text(&self) -> &str {
        &self.text[self.prompt_text.len()..]
    }
}

impl Serialize for GeneratedSample {
    fn serialize<S: Serializer>(&self, serializer: S) -> std::result::Result<S::Ok, S::Error> {
        let tokens: Vec<&str> = self.tokens().collect();
        let mut s = serializer.serialize_struct("GeneratedSample", 7)?;
        s.serialize_field("sample_id", &self.sample_id)?;
        s.serialize_field("text", &self.text)?;
        s.serialize_field("tokens", &tokens)?;
        s.serialize_field("strategy", &self.strategy)?;
        s.serialize_field("prompt_text", &self.prompt_text)?;
        s.serialize_field("model_id", &self.model_id)?;
        s.serialize_field("seed", &self.seed)?;
        s.end()
    }
}

impl<'de> Deserialize<'de> for GeneratedSample {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        struct Raw {
            sample_id: u64,
            text: String,
            tokens: Vec<String>,
            strategy: SamplerConfig,
            prompt_text: String,
            model_id: String,
            seed: u64,
        }
        let raw = Raw::deserialize(deserializer)?;
        let mut end = raw.prompt_text.len();
        let mut token_ends = Vec::with_capacity(raw.tokens.len());
        for t in &raw.tokens {
            end += t.len();
            token_ends.push(end as u32);
        }
        let consistent = raw.text.starts_with(&raw.prompt_text)
            && end == raw.text.len()
            && raw.text[raw.prompt_text.len()..] == raw.tokens.concat();
        if !consistent {
            return Err(de::Error::custom(
                "sample text is not prompt_text followed by its tokens",
            ));
        }
        Ok(GeneratedSample {
            sample_id: raw.sample_id,
            text: raw.text,
            strategy: raw.strategy,
            prompt_text: raw.prompt_text,
            model_id: raw.model_id,
            seed: raw.seed,
            token_ends,
        })
    }
}

/// De-duplicated seed lines for prefix-conditioned sampling.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ContextPool {
    pub prefixes: Vec<String>,
    pub source_path: String,
}

impl ContextPool {
    /// Trims lines, keeps the first occurrence of each exact line, and drops
    /// lines with fewer than `min_words` whitespace-delimited words.
    pub fn from_text(text: &str, min_words: usize, source_path: impl Into<String>) -> Self {
        let mut seen = std::collections::HashSet::new();
        let prefixes = text
            .lines()
            .map(str::trim)
            .filter(|l| l.split_whitespace().count() >= min_words)
            .filter(|l| seen.insert(*l))
            .map(str::to_string)
            .collect();
        ContextPool {
            prefixes,
            source_path: source_path.into(),
        }
    }

    pub fn len(&self) -> usize {
        self.prefixes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.prefixes.is_empty()
    }

    /// Drops prefixes the given models cannot tokenize. Models without a
    /// local vocabulary accept everything.
    pub fn retain_encodable(&mut self, models: &[&dyn LanguageModel]) {
        self.prefixes.retain(|p| {
            models.iter().all(|m| match m.vocabulary() {
                Some(v) => {
                    let mut buf = [0u8; 4];
                    p.chars().all(|c| v.id_of(c.encode_utf8(&mut buf)).is_some())
                }
                None => true,
            })
        });
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for p in &self.prefixes {
            out.push_str(p);
            out.push('\n');
        }
        out
    }
}

pub fn build_context_pool(raw_text_path: impl AsRef<Path>, min_words: usize) -> Result<ContextPool> {
    let path = raw_text_path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(ContextPool::from_text(&text, min_words, path.display().to_string()))
}

/// The first `words` whitespace-delimited words of `line`, original spacing kept.
fn leading_words(line: &str, words: usize) -> &str {
    let mut count = 0;
    let mut in_word = false;
    for (i, c) in line.char_indices() {
        if c.is_whitespace() {
            if in_word {
                count += 1;
                if count == words {
                    return &line[..i];
                }
            }
            in_word = false;
        } else {
            in_word = true;
        }
    }
    line
}

/// Generates one sample. Deterministic in `(config, sample_id)`.
pub fn generate_sample(
    model: &dyn LanguageModel,
    config: &SamplerConfig,
    pool: Option<&ContextPool>,
    sample_id: u64,
) -> Result<GeneratedSample> {
    let seed = derive_seed(config.master_seed, sample_id);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let prompt_text = match config.strategy {
        Strategy::PrefixConditioned => {
            let pool = pool.ok_or(Error::EmptyPool)?;
            if pool.is_empty() {
                return Err(Error::EmptyPool);
            }
            let line = &pool.prefixes[rng.gen_range(0..pool.len())];
            let words = rng.gen_range(config.context_min_tokens..=config.context_max_tokens);
            leading_words(line, words).to_string()
        }
        _ => String::new(),
    };
    let mut text = prompt_text.clone();
    let mut token_ends = Vec::with_capacity(config.max_tokens);
    let mut dist = NextTokenDistribution {
        candidates: Vec::new(),
        truncation: 0,
    };
    for position in 0..config.max_tokens {
        let t = match config.strategy {
            Strategy::DecayedTemperature => temperature_at(config, position),
            _ => 1.0,
        };
        let tok = step(
            model,
            &text,
            config.n,
            t,
            config.temperature_before_truncation,
            &mut rng,
            &mut dist,
        )?;
        text.push_str(tok);
        token_ends.push(text.len() as u32);
    }
    Ok(GeneratedSample {
        sample_id,
        text,
        strategy: config.clone(),
        prompt_text,
        model_id: model.model_id().to_string(),
        seed,
        token_ends,
    })
}

/// Generates samples with ids `first_id .. first_id + config.num_samples`
/// on the current rayon pool. Output order follows sample id.
pub fn sample_range(
    model: &dyn LanguageModel,
    config: &SamplerConfig,
    pool: Option<&ContextPool>,
    first_id: u64,
) -> Result<Vec<GeneratedSample>> {
    config.validate()?;
    if config.strategy == Strategy::PrefixConditioned && pool.is_none_or(ContextPool::is_empty) {
        return Err(Error::EmptyPool);
    }
    (first_id..first_id + config.num_samples as u64)
        .into_par_iter()
        .map(|id| generate_sample(model, config, pool, id))
        .collect()
}

pub fn sample_batch(
    model: &dyn LanguageModel,
    config: &SamplerConfig,
    pool: Option<&ContextPool>,
) -> Result<Vec<GeneratedSample>> {
    sample_range(model, config, pool, 0)
}

/// Result of beam search or greedy decoding.
#[derive(Debug, Clone, PartialEq)]
pub struct Extension {
    /// Generated tokens, prompt excluded.
    pub tokens: Vec<String>,
    /// Sum of raw token logprobs.
    pub logprob: f64,
}

impl Extension {
    pub fn text(&self) -> String {
        self.tokens.concat()
    }
}

/// Standard beam search over raw logprobs: each step keeps the `width`
/// highest cumulative-logprob extensions. No length normalization. Ties keep
/// the earlier beam, then the higher-ranked candidate.
pub fn beam_extend(model: &dyn LanguageModel, prefix: &str, width: usize, steps: usize) -> Result<Extension> {
    if width == 0 {
        return Err(Error::InvalidArgument("beam width must be >= 1".into()));
    }
    if steps == 0 {
        return Err(Error::InvalidArgument("beam steps must be >= 1".into()));
    }
    let mut beams: Vec<(String, Vec<String>, f64)> = vec![(prefix.to_string(), Vec::new(), 0.0)];
    for _ in 0..steps {
        let mut next: Vec<(usize, usize, f64, String)> = Vec::new();
        for (b, (text, _, score)) in beams.iter().enumerate() {
            let dist = model.top_k_text(text, width)?;
            for (c, cand) in dist.candidates.iter().enumerate() {
                next.push((b, c, score + cand.logprob, cand.token.text.to_string()));
            }
        }
        if next.is_empty() {
            return Err(Error::ModelUnavailable("model returned no candidates".into()));
        }
        next.sort_by(|x, y| y.2.total_cmp(&x.2).then(x.0.cmp(&y.0)).then(x.1.cmp(&y.1)));
        next.truncate(width);
        beams = next
            .into_iter()
            .map(|(b, _, score, tok)| {
                let (text, toks, _) = &beams[b];
                let mut text = text.clone();
                text.push_str(&tok);
                let mut toks = toks.clone();
                toks.push(tok);
                (text, toks, score)
            })
            .collect();
    }
    let (_, tokens, logprob) = beams.swap_remove(0);
    Ok(Extension { tokens, logprob })
}

/// Argmax decoding; identical to `beam_extend` with width 1.
pub fn greedy(model: &dyn LanguageModel, prefix: &str, steps: usize) -> Result<Extension> {
    let mut text = prefix.to_string();
    let mut tokens = Vec::with_capacity(steps);
    let mut logprob = 0.0;
    for _ in 0..steps {
        let dist = model.top_k_text(&text, 1)?;
        let best = dist
            .argmax()
            .ok_or_else(|| Error::ModelUnavailable("model returned no candidates".into()))?;
        text.push_str(&best.token.text);
        tokens.push(best.token.text.to_string());
        logprob += best.logprob;
    }
    Ok(Extension { tokens, logprob })
}
