//! Black-box language-model abstraction.
//!
//! Every consumer in the crate talks to a model through [`LanguageModel`]:
//! per-token log-probabilities of a sequence and the top-k next-token
//! distribution after a prefix. Nothing else about the model is visible.
//!
//! All log-probabilities are natural logs. The first token of a scored
//! sequence is conditioned on the model's start-of-sequence context, and
//! top-k ties are broken by ascending token id.

use std::collections::HashMap;
use std::fmt;
use std::sync::Arc;

use crate::error::{Error, Result};

/// Shared handle to a model; handles are immutable and safe to query from
/// many threads at once.
pub type ModelHandle = Arc<dyn LanguageModel>;

/// A single vocabulary entry.
#[derive(Clone, PartialEq, Eq, Hash)]
pub struct Token {
    pub id: u32,
    pub text: Arc<str>,
}

impl Token {
    pub fn new(id: u32, text: impl Into<Arc<str>>) -> Self {
        Token {
            id,
            text: text.into(),
        }
    }
}

impl fmt::Debug for Token {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Token({}, {:?})", self.id, &*self.text)
    }
}

/// Concatenates the texts of a token sequence.
pub fn detokenize(tokens: &[Token]) -> String {
    tokens.iter().map(|t| &*t.text).collect()
}

/// Bijection between token ids and token texts, with one reserved
/// start-of-sequence id that is never emitted.
#[derive(Debug, Clone)]
pub struct Vocabulary {
    entries: Vec<Arc<str>>,
    index: HashMap<Arc<str>, u32>,
    bos_id: u32,
}

impl Vocabulary {
    pub fn new<S: Into<Arc<str>>>(entries: Vec<S>, bos_id: u32) -> Result<Self> {
        let entries: Vec<Arc<str>> = entries.into_iter().map(Into::into).collect();
        if entries.len() < 2 {
            return Err(Error::InvalidArgument(format!(
                "vocabulary needs at least 2 entries, got {}",
                entries.len()
            )));
        }
        if bos_id as usize >= entries.len() {
            return Err(Error::InvalidArgument(format!(
                "bos id {bos_id} outside vocabulary of size {}",
                entries.len()
            )));
        }
        let mut index = HashMap::with_capacity(entries.len());
        for (id, text) in entries.iter().enumerate() {
            if text.is_empty() {
                return Err(Error::InvalidArgument(format!("token {id} has empty text")));
            }
            if index.insert(text.clone(), id as u32).is_some() {
                return Err(Error::InvalidArgument(format!(
                    "token text {:?} appears twice",
                    &**text
                )));
            }
        }
        Ok(Vocabulary {
            entries,
            index,
            bos_id,
        })
    }

    pub fn size(&self) -> usize {
        self.entries.len()
    }

    pub fn bos_id(&self) -> u32 {
        self.bos_id
    }

    /// Number of tokens a model can emit (everything except BOS).
    pub fn emittable(&self) -> usize {
        self.entries.len() - 1
    }

    pub fn token(&self, id: u32) -> Option<Token> {
        self.entries.get(id as usize).map(|t| Token {
            id,
            text: t.clone(),
        })
    }

    pub fn text(&self, id: u32) -> Option<&str> {
        self.entries.get(id as usize).map(|t| &**t)
    }

    pub fn id_of(&self, text: &str) -> Option<u32> {
        self.index.get(text).copied()
    }

    pub fn entries(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|t| &**t)
    }

    pub(crate) fn shared_text(&self, id: u32) -> Arc<str> {
        self.entries[id as usize].clone()
    }
}

/// Per-token natural-log probabilities of a scored sequence.
#[derive(Debug, Clone, PartialEq)]
pub struct SequenceScore {
    token_logprobs: Vec<f64>,
}

impl SequenceScore {
    /// Every entry must be finite and at most zero.
    pub fn new(token_logprobs: Vec<f64>) -> Result<Self> {
        if let Some(bad) = token_logprobs
            .iter()
            .find(|lp| !lp.is_finite() || **lp > 0.0)
        {
            return Err(Error::InvalidArgument(format!(
                "log-probability {bad} is not a finite value <= 0"
            )));
        }
        Ok(SequenceScore { token_logprobs })
    }

    pub fn token_logprobs(&self) -> &[f64] {
        &self.token_logprobs
    }

    pub fn len(&self) -> usize {
        self.token_logprobs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.token_logprobs.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Candidate {
    pub token: Token,
    pub logprob: f64,
}

/// The highest-probability next tokens, sorted by descending logprob.
#[derive(Debug, Clone, PartialEq)]
pub struct NextTokenDistribution {
    pub candidates: Vec<Candidate>,
    /// The `k` actually used; equals the emittable vocabulary size when a
    /// larger `k` was requested.
    pub truncation: usize,
}

impl NextTokenDistribution {
    pub fn len(&self) -> usize {
        self.candidates.len()
    }

    pub fn is_empty(&self) -> bool {
        self.candidates.is_empty()
    }

    pub fn argmax(&self) -> Option<&Candidate> {
        self.candidates.first()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ModelKind {
    Reference,
    Remote,
}

/// Input/output access to a language model.
///
/// Implementations must be deterministic: the same query always returns
/// bitwise-identical results.
pub trait LanguageModel: Send + Sync {
    fn model_id(&self) -> &str;

    fn kind(&self) -> ModelKind;

    /// The model's vocabulary when it is known locally.
    fn vocabulary(&self) -> Option<&Vocabulary>;

    /// Splits text into the model's own tokens.
    fn tokenize(&self, text: &str) -> Result<Vec<Token>>;

    /// `logprob_i = log p(x_i | BOS, x_1..x_{i-1})` for every token.
    fn score_sequence(&self, tokens: &[Token]) -> Result<SequenceScore>;

    /// Raw (untempered) top-k continuation after `prefix`. An empty prefix
    /// means BOS-only context.
    fn top_k(&self, prefix: &[Token], k: usize) -> Result<NextTokenDistribution>;

    fn score_text(&self, text: &str) -> Result<(Vec<Token>, SequenceScore)> {
        let tokens = self.tokenize(text)?;
        let score = self.score_sequence(&tokens)?;
        Ok((tokens, score))
    }

    fn top_k_text(&self, prefix: &str, k: usize) -> Result<NextTokenDistribution> {
        let tokens = self.tokenize(prefix)?;
        self.top_k(&tokens, k)
    }
}

/// A model that assigns `1/|V|` to every token in every context. Useful as
/// a baseline and as a fixture.
#[derive(Debug, Clone)]
pub struct UniformModel {
    id: String,
    vocab: Vocabulary,
}

impl UniformModel {
    /// Emittable tokens get ids `0..size` and single-character texts starting
    /// at U+0100; BOS takes id `size`.
    pub fn new(size: usize) -> Result<Self> {
        if size == 0 {
            return Err(Error::InvalidArgument("uniform model needs |V| >= 1".into()));
        }
        let mut entries: Vec<String> = (0..size as u32)
            .map(|i| char::from_u32(0x100 + i).expect("valid scalar").to_string())
            .collect();
        entries.push("<bos>".to_string());
        Ok(UniformModel {
            id: format!("uniform-{size}"),
            vocab: Vocabulary::new(entries, size as u32)?,
        })
    }

    fn logprob(&self) -> f64 {
        -(self.vocab.emittable() as f64).ln()
    }

    fn check(&self, tokens: &[Token]) -> Result<()> {
        for t in tokens {
            if t.id >= self.vocab.bos_id() {
                return Err(Error::UnknownToken(format!("id {}", t.id)));
            }
        }
        Ok(())
    }
}

impl LanguageModel for UniformModel {
    fn model_id(&self) -> &str {
        &self.id
    }

    fn kind(&self) -> ModelKind {
        ModelKind::Reference
    }

    fn vocabulary(&self) -> Option<&Vocabulary> {
        Some(&self.vocab)
    }

    fn tokenize(&self, text: &str) -> Result<Vec<Token>> {
        let mut buf = [0u8; 4];
        text.chars()
            .map(|c| {
                let s = c.encode_utf8(&mut buf);
                match self.vocab.id_of(s) {
                    Some(id) if id != self.vocab.bos_id() => Ok(Token::new(id, &*s)),
                    _ => Err(Error::UnknownToken(format!("{c:?}"))),
                }
            })
            .collect()
    }

    fn score_sequence(&self, tokens: &[Token]) -> Result<SequenceScore> {
        self.check(tokens)?;
        SequenceScore::new(vec![self.logprob(); tokens.len()])
    }

    fn top_k(&self, prefix: &[Token], k: usize) -> Result<NextTokenDistribution> {
        if k == 0 {
            return Err(Error::InvalidArgument("k must be >= 1".into()));
        }
        self.check(prefix)?;
        let truncation = k.min(self.vocab.emittable());
        let lp = self.logprob();
        let candidates = (0..truncation as u32)
            .map(|id| Candidate {
                token: self.vocab.token(id).expect("id in range"),
                logprob: lp,
            })
            .collect();
        Ok(NextTokenDistribution {
            candidates,
            truncation,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn vocabulary_rejects_duplicates_and_bad_bos() {
        assert!(Vocabulary::new(vec!["a", "a"], 0).is_err());
        assert!(Vocabulary::new(vec!["a", "b"], 2).is_err());
        assert!(Vocabulary::new(vec!["a"], 0).is_err());
        assert!(Vocabulary::new(vec!["a", ""], 0).is_err());
        let v = Vocabulary::new(vec!["a", "b", "<bos>"], 2).unwrap();
        assert_eq!(v.size(), 3);
        assert_eq!(v.emittable(), 2);
        assert_eq!(v.id_of("b"), Some(1));
    }

    #[test]
    fn uniform_scores_are_minus_ln_v() {
        let m = UniformModel::new(50).unwrap();
        let toks: Vec<Token> = (0..4).map(|i| m.vocab.token(i).unwrap()).collect();
        let s = m.score_sequence(&toks).unwrap();
        assert_eq!(s.len(), 4);
        for lp in s.token_logprobs() {
            assert_eq!(*lp, (1.0f64 / 50.0).ln());
        }
    }

    #[test]
    fn uniform_top_k_breaks_ties_by_id() {
        let m = UniformModel::new(50).unwrap();
        let d = m.top_k(&[], 3).unwrap();
        let ids: Vec<u32> = d.candidates.iter().map(|c| c.token.id).collect();
        assert_eq!(ids, vec![0, 1, 2]);
        assert_eq!(d.truncation, 3);
        let all = m.top_k(&[], 500).unwrap();
        assert_eq!(all.len(), 50);
        assert_eq!(all.truncation, 50);
    }

    #[test]
    fn sequence_score_validates_entries() {
        assert!(SequenceScore::new(vec![0.0, -1.0]).is_ok());
        assert!(SequenceScore::new(vec![0.1]).is_err());
        assert!(SequenceScore::new(vec![f64::NEG_INFINITY]).is_err());
        assert!(SequenceScore::new(vec![f64::NAN]).is_err());
    }
}
