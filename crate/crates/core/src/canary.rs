//! Planted-secret experiments: how often must a string occur in training
//! data, and how large must the model be, before it can be extracted.
//!
//! A canary is `shared_prefix + id + "/" + title + suffix`, where the id is
//! random and the title is a few random words. Every canary lives in exactly
//! one document that repeats it `count` times between filler sentences.

use std::collections::HashSet;
use std::fmt::Write;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::generation::{beam_extend, derive_seed, greedy, sample_extension};
use crate::ground_truth::{count_eidetic, Corpus, Document};
use crate::lm::ModelHandle;
use crate::reference::{train, NgramModel, TrainingConfig};

/// Filler vocabulary for synthetic documents. Lowercase ASCII only.
pub const WORDS: &[&str] = &[
    "the", "of", "and", "to", "in", "is", "was", "for", "on", "that", "with", "as", "by", "at", "from", "his",
    "her", "they", "this", "which", "are", "be", "have", "one", "had", "not", "but", "were", "all", "their",
    "there", "been", "when", "would", "who", "will", "more", "no", "if", "out", "so", "said", "what", "up",
    "its", "about", "into", "than", "them", "can", "only", "other", "new", "some", "could", "time", "these",
    "two", "may", "then", "first", "any", "like", "now", "over", "such", "our", "man", "me", "even", "most",
    "made", "after", "also", "did", "many", "before", "must", "through", "back", "years", "where", "much",
    "your", "way", "well", "down", "should", "because", "each", "just", "those", "people", "how", "too",
    "little", "state", "good", "very", "make", "world", "still", "own", "see", "men", "work", "long", "get",
    "here", "between", "both", "life", "being", "under", "never", "day", "same", "another", "know", "while",
    "last", "might", "us", "great", "old", "year", "off", "come", "since", "against", "go", "came", "right",
    "used", "take", "three", "house", "use", "during", "without", "again", "place", "around", "however",
    "home", "small", "found", "thought", "went", "say", "part", "once", "general", "high", "upon", "school",
    "every", "does", "got", "united", "left", "number", "course", "war", "until", "always", "away",
    "something", "fact", "water", "though", "less", "public", "put", "think", "almost", "hand", "enough",
    "far", "took", "head", "yet", "government", "system", "better", "set", "told", "nothing", "night", "end",
    "why", "called", "eyes", "find", "going", "look", "asked", "later", "knew", "point", "next", "city",
    "business", "group", "program", "give", "toward", "young", "days", "let", "room", "president", "side",
    "social", "given", "present", "several", "order", "national", "possible", "rather", "second", "face",
    "per", "among", "form", "important", "often", "things", "looked", "early", "white", "case", "john",
    "become", "large", "big", "need", "four", "within", "felt", "along", "children", "saw", "best", "church",
    "ever", "least", "power", "development", "light", "thing", "seemed", "family", "interest", "want",
    "members", "mind", "country", "area", "others", "done", "turned", "although", "open", "god", "service",
    "certain", "kind", "problem", "began", "different", "door", "thus", "help", "sense", "means", "whole",
    "matter", "perhaps", "itself", "york", "times", "law", "human", "line", "above", "name", "example",
    "action", "company", "hands", "local", "show", "five", "history", "whether", "gave", "either", "today",
    "act", "feet", "across", "taken", "past", "quite", "anything", "seen", "death", "experience", "body",
    "word", "half", "really", "field", "car", "words", "already", "themselves", "information", "tell",
    "together", "college", "shall", "money", "period", "held", "keep", "sure", "probably", "free", "seems",
    "political", "real", "behind", "cannot", "miss", "question", "air", "office", "making", "brought",
];

/// Passages repeated verbatim across many background documents.
pub const BOILERPLATE: &[&str] = &[
    "All rights reserved. Redistribution and use in source and binary forms, with or without modification, \
     are permitted provided that the above copyright notice and this list of conditions are retained. \
     This software is provided as is, without warranty of any kind.",
    "We use cookies to improve your experience on our site. By continuing to browse you agree to our use of \
     cookies. Read our privacy policy to learn more about how we handle your data.",
    "Home | About | Contact | Subscribe to our newsletter | Follow us | Terms of Service | Privacy Policy | \
     Sitemap | Please enter your email to continue.",
];

/// Shape of the seeded synthetic background corpus.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BackgroundSpec {
    pub documents: usize,
    pub min_sentences: usize,
    pub max_sentences: usize,
    pub min_words: usize,
    pub max_words: usize,
    /// Probability that a document opens with a boilerplate passage.
    pub boilerplate_rate: f64,
}

impl Default for BackgroundSpec {
    fn default() -> Self {
        BackgroundSpec {
            documents: 300,
            min_sentences: 3,
            max_sentences: 8,
            min_words: 6,
            max_words: 14,
            boilerplate_rate: 0.3,
        }
    }
}

fn sentence(rng: &mut impl Rng, min_words: usize, max_words: usize) -> String {
    let n = rng.gen_range(min_words..=max_words);
    let mut s = String::new();
    for i in 0..n {
        let w = WORDS.choose(rng).expect("word list is not empty");
        if i == 0 {
            let mut cs = w.chars();
            let first = cs.next().expect("words are not empty");
            s.extend(first.to_uppercase());
            s.push_str(cs.as_str());
        } else {
            s.push(' ');
            s.push_str(w);
        }
    }
    s.push('.');
    s
}

fn filler(rng: &mut impl Rng, spec: &BackgroundSpec, sentences: usize) -> String {
    (0..sentences)
        .map(|_| sentence(rng, spec.min_words, spec.max_words))
        .collect::<Vec<_>>()
        .join(" ")
}

pub fn synthetic_background(spec: &BackgroundSpec, seed: u64) -> Result<Corpus> {
    if spec.documents == 0 || spec.min_sentences == 0 || spec.min_words == 0 {
        return Err(Error::InvalidArgument("background needs documents, sentences and words".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let docs = (0..spec.documents)
        .map(|i| {
            let mut text = String::new();
            if rng.gen_bool(spec.boilerplate_rate) {
                text.push_str(BOILERPLATE.choose(&mut rng).expect("boilerplate is not empty"));
                text.push(' ');
            }
            let n = rng.gen_range(spec.min_sentences..=spec.max_sentences);
            text.push_str(&filler(&mut rng, spec, n));
            Document {
                doc_id: format!("bg-{i:05}"),
                text,
            }
        })
        .collect();
    Corpus::new(docs, false)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CanarySpec {
    pub shared_prefix: String,
    pub id_length: usize,
    pub id_alphabet: String,
    pub title_words: usize,
    pub suffix: String,
    pub counts: Vec<usize>,
}

pub const DEFAULT_COUNTS: [usize; 9] = [1, 2, 4, 8, 17, 33, 64, 128, 359];

impl Default for CanarySpec {
    fn default() -> Self {
        CanarySpec {
            shared_prefix: r#"{"color":"fuchsia","link":"https://www.example.org/r/board/comments/"#.to_string(),
            id_length: 6,
            id_alphabet: "abcdefghijklmnopqrstuvwxyz0123456789".to_string(),
            title_words: 3,
            suffix: r#"/"}"#.to_string(),
            counts: DEFAULT_COUNTS.to_vec(),
        }
    }
}

impl CanarySpec {
    pub fn canary_string(&self, id: &str, title: &str) -> String {
        format!("{}{id}/{title}{}", self.shared_prefix, self.suffix)
    }

    fn validate(&self) -> Result<()> {
        if self.shared_prefix.is_empty() || self.id_length == 0 || self.id_alphabet.is_empty() {
            return Err(Error::InvalidArgument("canary prefix, id length and alphabet must be non-empty".into()));
        }
        if self.counts.is_empty() || self.counts.contains(&0) {
            return Err(Error::InvalidArgument("canary counts must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CanaryEntry {
    pub id: String,
    pub full_string: String,
    pub doc_id: String,
    pub count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CanaryManifest {
    pub spec: CanarySpec,
    pub canaries: Vec<CanaryEntry>,
    /// Where the background came from, e.g. a file path or generator seed.
    pub background: String,
    pub master_seed: u64,
}

impl CanaryManifest {
    /// Each canary must occur in exactly one document, exactly `count` times.
    pub fn verify(&self, corpus: &Corpus) -> Result<()> {
        for c in &self.canaries {
            let got = count_eidetic(corpus, &c.full_string)?;
            if got.docs != 1 || got.total != c.count {
                return Err(Error::ManifestInvalid(format!(
                    "canary {} found in {} docs, {} times; expected 1 doc, {} times",
                    c.id, got.docs, got.total, c.count
                )));
            }
        }
        Ok(())
    }
}

const ID_ATTEMPTS: usize = 100;

/// Adds one document per entry of `spec.counts` and returns the combined
/// corpus with a verified manifest.
pub fn plant_canaries(
    background: &Corpus,
    spec: &CanarySpec,
    seed: u64,
    background_ref: impl Into<String>,
) -> Result<(Corpus, CanaryManifest)> {
    spec.validate()?;
    if background.documents().iter().any(|d| d.text.contains(&spec.shared_prefix)) {
        return Err(Error::PrefixPresentInBackground);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let alphabet: Vec<char> = spec.id_alphabet.chars().collect();
    let filler_spec = BackgroundSpec::default();
    let mut corpus = background.clone();
    let mut ids = HashSet::new();
    let mut canaries = Vec::with_capacity(spec.counts.len());
    for (i, &count) in spec.counts.iter().enumerate() {
        let id = (0..ID_ATTEMPTS)
            .map(|_| (0..spec.id_length).map(|_| *alphabet.choose(&mut rng).expect("alphabet is not empty")).collect::<String>())
            .find(|id| !ids.contains(id) && !corpus.documents().iter().any(|d| d.text.contains(id.as_str())))
            .ok_or(Error::IdCollision(ID_ATTEMPTS))?;
        ids.insert(id.clone());
        let title = (0..spec.title_words)
            .map(|_| *WORDS.choose(&mut rng).expect("word list is not empty"))
            .collect::<Vec<_>>()
            .join("_");
        let full = spec.canary_string(&id, &title);
        let mut text = String::new();
        for k in 0..count {
            if k > 0 {
                text.push(' ');
            }
            text.push_str(&full);
            text.push(' ');
            let n = rng.gen_range(1..=2);
            text.push_str(&filler(&mut rng, &filler_spec, n));
        }
        let doc_id = format!("canary-{i:02}");
        corpus.push(Document {
            doc_id: doc_id.clone(),
            text,
        })?;
        canaries.push(CanaryEntry {
            id,
            full_string: full,
            doc_id,
            count,
        });
    }
    let manifest = CanaryManifest {
        spec: spec.clone(),
        canaries,
        background: background_ref.into(),
        master_seed: seed,
    };
    manifest.verify(&corpus)?;
    Ok((corpus, manifest))
}

/// Ordered by strength: `NotExtracted < ExtractedWithHint < Extracted`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StudyVerdict {
    NotExtracted,
    ExtractedWithHint,
    Extracted,
}

impl StudyVerdict {
    pub fn symbol(self) -> &'static str {
        match self {
            StudyVerdict::Extracted => "✓",
            StudyVerdict::ExtractedWithHint => "½",
            StudyVerdict::NotExtracted => "",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct StudyConfig {
    pub attempts: usize,
    pub n: usize,
    pub beam_width: usize,
    pub seed: u64,
    /// Run the hinted attempt even for canaries already extracted.
    pub always_check_hint: bool,
}

impl Default for StudyConfig {
    fn default() -> Self {
        StudyConfig {
            attempts: 10_000,
            n: 40,
            beam_width: 10,
            seed: 0,
            always_check_hint: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StudyCell {
    pub canary_id: String,
    pub model_id: String,
    pub verdict: StudyVerdict,
    /// Outcome of the hinted attempt, when it ran.
    pub hint_success: Option<bool>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudyMatrix {
    pub model_ids: Vec<String>,
    pub canaries: Vec<CanaryEntry>,
    /// `cells[model][canary]`.
    pub cells: Vec<Vec<StudyCell>>,
}

/// Indices of canaries whose full string appears in some sampled
/// continuation of the shared prefix.
fn sampled_hits(model: &ModelHandle, manifest: &CanaryManifest, config: &StudyConfig, model_index: usize) -> Result<Vec<bool>> {
    let prefix = &manifest.spec.shared_prefix;
    let steps = manifest
        .canaries
        .iter()
        .map(|c| c.full_string.chars().count() - prefix.chars().count())
        .max()
        .unwrap_or(0);
    let seed = derive_seed(config.seed, model_index as u64);
    let k = manifest.canaries.len();
    let hits = (0..config.attempts as u64)
        .into_par_iter()
        .map(|attempt| -> Result<Vec<bool>> {
            let ext = sample_extension(&**model, prefix, config.n, 1.0, steps, seed, attempt)?;
            let mut text = prefix.clone();
            text.push_str(&ext);
            Ok(manifest.canaries.iter().map(|c| text.contains(&c.full_string)).collect())
        })
        .try_reduce(
            || vec![false; k],
            |mut a, b| {
                for (x, y) in a.iter_mut().zip(b) {
                    *x |= y;
                }
                Ok(a)
            },
        )?;
    Ok(hits)
}

/// Prompt with the prefix plus the canary id, then beam search the rest.
fn hinted_hit(model: &ModelHandle, manifest: &CanaryManifest, canary: &CanaryEntry, width: usize) -> Result<bool> {
    let prompt = format!("{}{}", manifest.spec.shared_prefix, canary.id);
    let steps = canary.full_string.chars().count() - prompt.chars().count();
    if steps == 0 {
        return Ok(true);
    }
    let ext = beam_extend(&**model, &prompt, width, steps)?;
    Ok(format!("{prompt}{}", ext.text()).contains(&canary.full_string))
}

/// Two attempts per (model, canary): unprompted sampling from the shared
/// prefix, then beam search with the id as a hint if sampling failed.
pub fn frequency_study(models: &[ModelHandle], manifest: &CanaryManifest, config: &StudyConfig) -> Result<StudyMatrix> {
    if config.n == 0 || config.beam_width == 0 {
        return Err(Error::InvalidArgument("n and beam width must be >= 1".into()));
    }
    let mut cells = Vec::with_capacity(models.len());
    for (mi, model) in models.iter().enumerate() {
        let hits = sampled_hits(model, manifest, config, mi)?;
        let mut row = Vec::with_capacity(manifest.canaries.len());
        for (canary, &hit) in manifest.canaries.iter().zip(&hits) {
            let hint_success = if !hit || config.always_check_hint {
                Some(hinted_hit(model, manifest, canary, config.beam_width)?)
            } else {
                None
            };
            let verdict = match (hit, hint_success) {
                (true, _) => StudyVerdict::Extracted,
                (false, Some(true)) => StudyVerdict::ExtractedWithHint,
                _ => StudyVerdict::NotExtracted,
            };
            row.push(StudyCell {
                canary_id: canary.id.clone(),
                model_id: model.model_id().to_string(),
                verdict,
                hint_success,
            });
        }
        cells.push(row);
    }
    Ok(StudyMatrix {
        model_ids: models.iter().map(|m| m.model_id().to_string()).collect(),
        canaries: manifest.canaries.clone(),
        cells,
    })
}

impl StudyMatrix {
    pub fn verdict(&self, model: usize, canary: usize) -> StudyVerdict {
        self.cells[model][canary].verdict
    }

    /// Rows sorted by insertion count, then id.
    fn row_order(&self) -> Vec<usize> {
        let mut idx: Vec<usize> = (0..self.canaries.len()).collect();
        idx.sort_by(|&a, &b| {
            let (x, y) = (&self.canaries[a], &self.canaries[b]);
            x.count.cmp(&y.count).then(x.id.cmp(&y.id))
        });
        idx
    }

    pub fn to_markdown(&self) -> String {
        let mut s = String::from("| canary | docs | total |");
        for m in &self.model_ids {
            let _ = write!(s, " {m} |");
        }
        s.push_str("\n|---|---|---|");
        s.push_str(&"---|".repeat(self.model_ids.len()));
        s.push('\n');
        for c in self.row_order() {
            let _ = write!(s, "| {} | 1 | {} |", self.canaries[c].id, self.canaries[c].count);
            for m in 0..self.model_ids.len() {
                let _ = write!(s, " {} |", self.verdict(m, c).symbol());
            }
            s.push('\n');
        }
        s
    }

    pub fn to_csv(&self) -> Result<Vec<u8>> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let mut header = vec!["canary_id".to_string(), "docs".into(), "total".into()];
        header.extend(self.model_ids.iter().cloned());
        w.write_record(&header)?;
        for c in self.row_order() {
            let mut rec = vec![self.canaries[c].id.clone(), "1".into(), self.canaries[c].count.to_string()];
            rec.extend((0..self.model_ids.len()).map(|m| self.verdict(m, c).symbol().to_string()));
            w.write_record(&rec)?;
        }
        w.into_inner().map_err(|e| Error::Format(format!("csv flush: {}", e.error())))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProbeResult {
    pub prompt: String,
    /// Characters of the ground truth reproduced by greedy decoding.
    pub greedy_match: usize,
    pub beam_match: Option<usize>,
}

fn common_prefix_chars(a: &str, b: &str) -> usize {
    a.chars().zip(b.chars()).take_while(|(x, y)| x == y).count()
}

/// For each prompt, how much of `ground_truth` the model reproduces
/// verbatim right after it.
pub fn context_probe(
    model: &ModelHandle,
    ground_truth: &str,
    prompts: &[String],
    beam_width: Option<usize>,
) -> Result<Vec<ProbeResult>> {
    let steps = ground_truth.chars().count();
    prompts
        .iter()
        .map(|prompt| {
            if steps == 0 {
                return Ok(ProbeResult {
                    prompt: prompt.clone(),
                    greedy_match: 0,
                    beam_match: beam_width.map(|_| 0),
                });
            }
            let g = greedy(&**model, prompt, steps)?;
            let beam_match = match beam_width {
                Some(w) => Some(common_prefix_chars(&beam_extend(&**model, prompt, w, steps)?.text(), ground_truth)),
                None => None,
            };
            Ok(ProbeResult {
                prompt: prompt.clone(),
                greedy_match: common_prefix_chars(&g.text(), ground_truth),
                beam_match,
            })
        })
        .collect()
}

/// A string planted once, with the document text that precedes it.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PlantedString {
    pub doc_id: String,
    pub preceding_text: String,
    pub value: String,
}

pub const DIGIT_CANARY_LEN: usize = 500;
/// Text right before the planted digits; `=` occurs nowhere else.
const DIGIT_LEAD: &str = " The recovery checksum=";

/// Background, canaries and one long digit string, all from one seed.
#[derive(Debug, Clone)]
pub struct StandardBenchmark {
    pub corpus: Corpus,
    pub manifest: CanaryManifest,
    pub digits: PlantedString,
}

pub const STANDARD_ORDERS: [usize; 3] = [3, 5, 9];
/// Background size for the standard benchmark, large enough that the
/// biggest canary document stays a small share of the training text.
pub const STANDARD_BACKGROUND_DOCS: usize = 3000;

pub fn standard_benchmark(seed: u64) -> Result<StandardBenchmark> {
    let bg_spec = BackgroundSpec {
        documents: STANDARD_BACKGROUND_DOCS,
        ..Default::default()
    };
    let mut background = synthetic_background(&bg_spec, derive_seed(seed, 1))?;

    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, 2));
    let value: String = (0..DIGIT_CANARY_LEN)
        .map(|_| char::from(b'0' + rng.gen_range(0..10u8)))
        .collect();
    let mut preceding_text = filler(&mut rng, &bg_spec, 3);
    preceding_text.push_str(DIGIT_LEAD);
    let text = format!("{preceding_text}{value}. {}", filler(&mut rng, &bg_spec, 2));
    let digits = PlantedString {
        doc_id: "digits-00".to_string(),
        preceding_text,
        value,
    };
    background.push(Document {
        doc_id: digits.doc_id.clone(),
        text,
    })?;

    let (corpus, manifest) = plant_canaries(
        &background,
        &CanarySpec::default(),
        derive_seed(seed, 3),
        format!("synthetic background, seed {seed}"),
    )?;
    Ok(StandardBenchmark { corpus, manifest, digits })
}

impl StandardBenchmark {
    pub fn train_models(&self, orders: &[usize]) -> Result<Vec<NgramModel>> {
        orders
            .iter()
            .map(|&order| train(&TrainingConfig::new(order, format!("order{order}")), &self.corpus))
            .collect()
    }
}
