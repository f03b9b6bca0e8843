//! Training-corpus lookups: exact occurrence counting for k-eidetic
//! memorization and fuzzy word-trigram verification of candidates.

use std::collections::{HashMap, HashSet};
use std::fs::File;
use std::io::{BufRead, BufReader, Read};
use std::path::Path;

use memchr::memmem;
use serde::{Deserialize, Serialize};

use crate::dedup::{trigram_key, words};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Document {
    pub doc_id: String,
    pub text: String,
}

/// Collapses whitespace runs into single spaces and trims both ends.
pub fn normalize_whitespace(text: &str) -> String {
    let mut out = String::with_capacity(text.len());
    for w in text.split_whitespace() {
        if !out.is_empty() {
            out.push(' ');
        }
        out.push_str(w);
    }
    out
}

/// The training documents. Each document is one independent training
/// example.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Corpus {
    documents: Vec<Document>,
    normalized: bool,
}

impl Corpus {
    /// Doc ids must be unique and texts non-empty (after normalization when
    /// `normalize` is set).
    pub fn new(documents: Vec<Document>, normalize: bool) -> Result<Self> {
        let mut corpus = Corpus {
            documents: Vec::with_capacity(documents.len()),
            normalized: normalize,
        };
        let mut seen = HashSet::new();
        for doc in documents {
            if !seen.insert(doc.doc_id.clone()) {
                return Err(Error::DuplicateDocument(doc.doc_id));
            }
            corpus.push_unchecked(doc)?;
        }
        Ok(corpus)
    }

    /// Un-normalized corpus with ids `doc-000000`, `doc-000001`, ...
    pub fn from_texts<'a>(texts: impl IntoIterator<Item = &'a str>) -> Result<Self> {
        let docs = texts
            .into_iter()
            .enumerate()
            .map(|(i, t)| Document {
                doc_id: format!("doc-{i:06}"),
                text: t.to_string(),
            })
            .collect();
        Corpus::new(docs, false)
    }

    fn push_unchecked(&mut self, mut doc: Document) -> Result<()> {
        if self.normalized {
            doc.text = normalize_whitespace(&doc.text);
        }
        if doc.text.is_empty() {
            return Err(Error::InvalidArgument(format!(
                "document {:?} has empty text",
                doc.doc_id
            )));
        }
        self.documents.push(doc);
        Ok(())
    }

    pub fn push(&mut self, doc: Document) -> Result<()> {
        if self.documents.iter().any(|d| d.doc_id == doc.doc_id) {
            return Err(Error::DuplicateDocument(doc.doc_id));
        }
        self.push_unchecked(doc)
    }

    pub fn documents(&self) -> &[Document] {
        &self.documents
    }

    pub fn get(&self, doc_id: &str) -> Option<&Document> {
        self.documents.iter().find(|d| d.doc_id == doc_id)
    }

    pub fn len(&self) -> usize {
        self.documents.len()
    }

    pub fn is_empty(&self) -> bool {
        self.documents.is_empty()
    }

    pub fn is_normalized(&self) -> bool {
        self.normalized
    }

    /// Reads `{"doc_id": .., "text": ..}` lines.
    pub fn load_jsonl(path: impl AsRef<Path>, normalize: bool) -> Result<Self> {
        let path = path.as_ref();
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        let mut docs = Vec::new();
        for line in BufReader::new(file).lines() {
            let line = line.map_err(|e| Error::io(path, e))?;
            if line.trim().is_empty() {
                continue;
            }
            docs.push(serde_json::from_str::<Document>(&line)?);
        }
        Corpus::new(docs, normalize)
    }

    pub fn to_jsonl(&self) -> Result<Vec<u8>> {
        crate::pipeline::io::jsonl_bytes(&self.documents)
    }

    pub fn save_jsonl(&self, path: impl AsRef<Path>) -> Result<()> {
        crate::pipeline::io::write_atomic(path.as_ref(), &self.to_jsonl()?)
    }
}

/// Occurrence statistics of a string in the corpus.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct EideticCount {
    /// Distinct documents containing the string.
    pub docs: usize,
    /// Occurrences summed over documents, overlaps included.
    pub total: usize,
}

/// Counts overlapping occurrences of `needle` in `haystack`.
pub fn count_overlapping(haystack: &str, needle: &str) -> usize {
    if needle.is_empty() {
        return 0;
    }
    let finder = memmem::Finder::new(needle.as_bytes());
    count_with(&finder, haystack.as_bytes())
}

fn count_with(finder: &memmem::Finder<'_>, hay: &[u8]) -> usize {
    let mut n = 0;
    let mut from = 0;
    while let Some(pos) = finder.find(&hay[from..]) {
        n += 1;
        from += pos + 1;
    }
    n
}

/// Case-sensitive substring counting over the corpus; the query is
/// whitespace-normalized when the corpus is.
pub fn count_eidetic(corpus: &Corpus, s: &str) -> Result<EideticCount> {
    let query = if corpus.is_normalized() {
        normalize_whitespace(s)
    } else {
        s.to_string()
    };
    if query.is_empty() {
        return Err(Error::EmptyQuery);
    }
    let finder = memmem::Finder::new(query.as_bytes());
    let mut count = EideticCount::default();
    for doc in corpus.documents() {
        let n = count_with(&finder, doc.text.as_bytes());
        if n > 0 {
            count.docs += 1;
            count.total += n;
        }
    }
    Ok(count)
}

const INDEX_MAGIC: &[u8; 8] = b"MAUDITIX";
const INDEX_FORMAT_VERSION: u32 = 1;

/// Word-trigram postings over a corpus.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NgramIndex {
    doc_ids: Vec<String>,
    /// trigram -> (doc index, word position), sorted.
    postings: HashMap<String, Vec<(u32, u32)>>,
}

#[derive(Serialize, Deserialize)]
struct IndexFile {
    format_version: u32,
    doc_ids: Vec<String>,
    postings: Vec<(String, Vec<(u32, u32)>)>,
}

pub fn build_index(corpus: &Corpus) -> NgramIndex {
    let mut postings: HashMap<String, Vec<(u32, u32)>> = HashMap::new();
    for (d, doc) in corpus.documents().iter().enumerate() {
        let ws: Vec<&str> = words(&doc.text).collect();
        for (pos, w) in ws.windows(3).enumerate() {
            postings
                .entry(trigram_key(w))
                .or_default()
                .push((d as u32, pos as u32));
        }
    }
    NgramIndex {
        doc_ids: corpus.documents().iter().map(|d| d.doc_id.clone()).collect(),
        postings,
    }
}

/// Outcome of fuzzy verification.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum Verification {
    Confirmed {
        doc_id: String,
        /// First word position of the tightest matching window.
        start: u32,
        /// Window length in words.
        span: u32,
    },
    NotFound,
}

impl Verification {
    pub fn is_confirmed(&self) -> bool {
        matches!(self, Verification::Confirmed { .. })
    }
}

pub const DEFAULT_PROXIMITY_FACTOR: f64 = 2.0;

impl NgramIndex {
    pub fn doc_ids(&self) -> &[String] {
        &self.doc_ids
    }

    pub fn postings(&self, trigram: &str) -> &[(u32, u32)] {
        self.postings.get(trigram).map_or(&[], |v| &v[..])
    }

    pub fn trigram_count(&self) -> usize {
        self.postings.len()
    }

    pub fn posting_count(&self) -> usize {
        self.postings.values().map(Vec::len).sum()
    }

    /// Confirmed iff one document holds every trigram of `candidate` with all
    /// matched trigrams inside `proximity_factor * words(candidate)`
    /// consecutive word positions. Has false positives, never false
    /// negatives for exact substrings.
    pub fn fuzzy_3gram_verify(&self, candidate: &str, proximity_factor: f64) -> Result<Verification> {
        let ws: Vec<&str> = words(candidate).collect();
        if ws.len() < 3 {
            return Err(Error::TooShort(ws.len()));
        }
        let window = (proximity_factor * ws.len() as f64).floor() as u64;
        let mut distinct: Vec<String> = ws.windows(3).map(trigram_key).collect();
        distinct.sort_unstable();
        distinct.dedup();

        let mut lists: Vec<&[(u32, u32)]> = Vec::with_capacity(distinct.len());
        for t in &distinct {
            let list = self.postings(t);
            if list.is_empty() {
                return Ok(Verification::NotFound);
            }
            lists.push(list);
        }
        let rarest = (0..lists.len())
            .min_by_key(|&i| lists[i].len())
            .expect("at least one trigram");

        let mut events: Vec<(u32, u32)> = Vec::new();
        let mut last_doc = None;
        for &(doc, _) in lists[rarest] {
            if last_doc == Some(doc) {
                continue;
            }
            last_doc = Some(doc);
            events.clear();
            let mut present = true;
            for (j, list) in lists.iter().enumerate() {
                let slice = doc_slice(list, doc);
                if slice.is_empty() {
                    present = false;
                    break;
                }
                events.extend(slice.iter().map(|&(_, pos)| (pos, j as u32)));
            }
            if !present {
                continue;
            }
            events.sort_unstable();
            if let Some((start, span)) = tightest_window(&events, lists.len()) {
                if span as u64 <= window {
                    return Ok(Verification::Confirmed {
                        doc_id: self.doc_ids[doc as usize].clone(),
                        start,
                        span,
                    });
                }
            }
        }
        Ok(Verification::NotFound)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut postings: Vec<(String, Vec<(u32, u32)>)> = self
            .postings
            .iter()
            .map(|(k, v)| (k.clone(), v.clone()))
            .collect();
        postings.sort_unstable_by(|a, b| a.0.cmp(&b.0));
        let file = IndexFile {
            format_version: INDEX_FORMAT_VERSION,
            doc_ids: self.doc_ids.clone(),
            postings,
        };
        let mut out = INDEX_MAGIC.to_vec();
        bincode::serialize_into(&mut out, &file)?;
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let body = bytes
            .strip_prefix(INDEX_MAGIC.as_slice())
            .ok_or_else(|| Error::Format("not a trigram index file".into()))?;
        let file: IndexFile = bincode::deserialize(body)?;
        if file.format_version != INDEX_FORMAT_VERSION {
            return Err(Error::Format(format!(
                "index format version {} (expected {INDEX_FORMAT_VERSION})",
                file.format_version
            )));
        }
        Ok(NgramIndex {
            doc_ids: file.doc_ids,
            postings: file.postings.into_iter().collect(),
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        crate::pipeline::io::write_atomic(path.as_ref(), &self.to_bytes()?)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let mut bytes = Vec::new();
        File::open(path)
            .and_then(|mut f| f.read_to_end(&mut bytes))
            .map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

fn doc_slice(list: &[(u32, u32)], doc: u32) -> &[(u32, u32)] {
    let lo = list.partition_point(|(d, _)| *d < doc);
    let hi = list.partition_point(|(d, _)| *d <= doc);
    &list[lo..hi]
}

/// Smallest word span covering one occurrence of each of `kinds` trigram
/// kinds. `events` are `(position, kind)` sorted by position. A trigram at
/// position `p` covers words `p..p + 3`.
fn tightest_window(events: &[(u32, u32)], kinds: usize) -> Option<(u32, u32)> {
    let mut have = vec![0u32; kinds];
    let mut covered = 0;
    let mut best: Option<(u32, u32)> = None;
    let mut left = 0;
    for right in 0..events.len() {
        let k = events[right].1 as usize;
        if have[k] == 0 {
            covered += 1;
        }
        have[k] += 1;
        while covered == kinds {
            let start = events[left].0;
            let span = events[right].0 + 3 - start;
            if best.is_none_or(|(_, s)| span < s) {
                best = Some((start, span));
            }
            let lk = events[left].1 as usize;
            have[lk] -= 1;
            if have[lk] == 0 {
                covered -= 1;
            }
            left += 1;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn eidetic_counts() {
        let corpus = Corpus::from_texts(["x canary x canary", "canary", "zzz"]).unwrap();
        assert_eq!(
            count_eidetic(&corpus, "canary").unwrap(),
            EideticCount { docs: 2, total: 3 }
        );
        assert_eq!(count_eidetic(&corpus, "absent").unwrap(), EideticCount::default());
        assert!(matches!(count_eidetic(&corpus, ""), Err(Error::EmptyQuery)));
    }

    #[test]
    fn overlapping_occurrences_count() {
        let corpus = Corpus::from_texts(["aaa"]).unwrap();
        assert_eq!(count_eidetic(&corpus, "aa").unwrap().total, 2);
        assert_eq!(count_overlapping("ababa", "aba"), 2);
        assert_eq!(count_overlapping("ééé", "éé"), 2);
    }

    #[test]
    fn normalized_corpus_collapses_whitespace() {
        let docs = vec![Document {
            doc_id: "a".into(),
            text: "  one \n\t two  three ".into(),
        }];
        let corpus = Corpus::new(docs, true).unwrap();
        assert_eq!(corpus.documents()[0].text, "one two three");
        assert_eq!(count_eidetic(&corpus, "one   two").unwrap().total, 1);
    }

    #[test]
    fn duplicate_doc_ids_rejected() {
        let d = Document {
            doc_id: "a".into(),
            text: "x".into(),
        };
        assert!(matches!(
            Corpus::new(vec![d.clone(), d], false),
            Err(Error::DuplicateDocument(_))
        ));
    }

    #[test]
    fn index_single_document() {
        let corpus = Corpus::from_texts(["a b c d"]).unwrap();
        let idx = build_index(&corpus);
        assert_eq!(idx.postings("a b c"), &[(0, 0)]);
        assert_eq!(idx.postings("b c d"), &[(0, 1)]);
        assert_eq!(idx.posting_count(), 2);
    }

    #[test]
    fn index_bytes_are_canonical() {
        let corpus = Corpus::from_texts(["a b c d e", "c d e f", "x y"]).unwrap();
        let a = build_index(&corpus).to_bytes().unwrap();
        let b = build_index(&corpus).to_bytes().unwrap();
        assert_eq!(a, b);
        let back = NgramIndex::from_bytes(&a).unwrap();
        assert_eq!(back, build_index(&corpus));
    }

    #[test]
    fn verify_exact_and_missing() {
        let corpus = Corpus::from_texts([
            "the quick brown fox jumps over the lazy dog",
            "lorem ipsum dolor sit amet",
        ])
        .unwrap();
        let idx = build_index(&corpus);
        let hit = idx.fuzzy_3gram_verify("brown fox jumps over", 2.0).unwrap();
        assert_eq!(
            hit,
            Verification::Confirmed {
                doc_id: "doc-000000".into(),
                start: 2,
                span: 4
            }
        );
        assert_eq!(
            idx.fuzzy_3gram_verify("nothing like this", 2.0).unwrap(),
            Verification::NotFound
        );
        assert!(matches!(
            idx.fuzzy_3gram_verify("too short", 2.0),
            Err(Error::TooShort(2))
        ));
    }

    #[test]
    fn scattered_trigrams_are_not_confirmed() {
        // Both trigrams of "a b c d" exist in doc 0, but 20 words apart.
        let filler = (0..20).map(|i| format!("f{i}")).collect::<Vec<_>>().join(" ");
        let doc = format!("a b c {filler} b c d");
        let corpus = Corpus::from_texts([doc.as_str(), "zz yy xx", "q r s"]).unwrap();
        let idx = build_index(&corpus);
        assert_eq!(idx.fuzzy_3gram_verify("a b c d", 2.0).unwrap(), Verification::NotFound);
        assert!(idx.fuzzy_3gram_verify("a b c", 2.0).unwrap().is_confirmed());
        // A wide enough window admits it.
        assert!(idx.fuzzy_3gram_verify("a b c d", 7.0).unwrap().is_confirmed());
    }

    #[test]
    fn proximity_false_positive_mode() {
        // "a b c d e" is not a substring, but its three trigrams sit close by.
        let corpus = Corpus::from_texts(["a b c d q b c d e"]).unwrap();
        assert_eq!(count_eidetic(&corpus, "a b c d e").unwrap().docs, 0);
        let idx = build_index(&corpus);
        assert!(idx.fuzzy_3gram_verify("a b c d e", 2.0).unwrap().is_confirmed());
    }
}
