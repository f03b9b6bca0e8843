//! Human verdicts on candidates and the closed category taxonomy.

use std::collections::{BTreeSet, HashMap};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::pipeline::select::CandidateRecord;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    Memorized,
    NotMemorized,
    Unsure,
}

macro_rules! categories {
    ($($variant:ident => $slug:literal, $desc:literal;)*) => {
        /// Kinds of memorized content.
        #[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
        pub enum Category {
            $(#[serde(rename = $slug)] $variant,)*
        }

        impl Category {
            pub const ALL: &'static [Category] = &[$(Category::$variant,)*];

            pub fn slug(self) -> &'static str {
                match self { $(Category::$variant => $slug,)* }
            }

            pub fn description(self) -> &'static str {
                match self { $(Category::$variant => $desc,)* }
            }
        }
    };
}

categories! {
    UsInternationalNews => "us_international_news", "US and international news";
    LogFiles => "log_files", "Log files and error reports";
    Licenses => "licenses", "License, terms of use, copyright notices";
    NamedItemLists => "named_item_lists", "Lists of named items";
    ForumWiki => "forum_wiki", "Forum or Wiki entry";
    ValidUrls => "valid_urls", "Valid URLs";
    NamedIndividuals => "named_individuals", "Named individuals";
    Promotional => "promotional", "Promotional content";
    HighEntropy => "high_entropy", "High entropy (UUIDs, base64, ...)";
    ContactInfo => "contact_info", "Contact info";
    Code => "code", "Code";
    ConfigFiles => "config_files", "Configuration files";
    ReligiousTexts => "religious_texts", "Religious texts";
    Pseudonyms => "pseudonyms", "Pseudonyms";
    TrumpQuotes => "trump_quotes", "Donald Trump tweets and quotes";
    WebForms => "web_forms", "Web forms";
    TechNews => "tech_news", "Tech news";
    NumberLists => "number_lists", "Lists of numbers";
    SportsNews => "sports_news", "Sports news";
    MovieSynopsis => "movie_synopsis", "Movie synopsis, cast";
    Pornography => "pornography", "Pornography";
}

impl Category {
    /// Personally identifiable information.
    pub fn is_pii(self) -> bool {
        matches!(self, Category::NamedIndividuals | Category::ContactInfo)
    }
}

impl fmt::Display for Category {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.slug())
    }
}

impl FromStr for Category {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Category::ALL
            .iter()
            .copied()
            .find(|c| c.slug() == s)
            .ok_or_else(|| Error::InvalidCategory(s.to_string()))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Label {
    pub verdict: Verdict,
    #[serde(default)]
    pub categories: BTreeSet<Category>,
    #[serde(default)]
    pub notes: String,
}

/// One line of a labels JSONL file. Categories stay as strings until
/// validated so an unknown slug yields `InvalidCategory`, not a parse error.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelLine {
    pub candidate_id: String,
    pub verdict: Verdict,
    #[serde(default)]
    pub categories: Vec<String>,
    #[serde(default)]
    pub notes: String,
}

impl LabelLine {
    pub fn from_label(candidate_id: impl Into<String>, label: &Label) -> Self {
        LabelLine {
            candidate_id: candidate_id.into(),
            verdict: label.verdict,
            categories: label.categories.iter().map(|c| c.slug().to_string()).collect(),
            notes: label.notes.clone(),
        }
    }

    pub fn to_label(&self) -> Result<Label> {
        let categories = self
            .categories
            .iter()
            .map(|c| c.parse())
            .collect::<Result<BTreeSet<Category>>>()?;
        Ok(Label {
            verdict: self.verdict,
            categories,
            notes: self.notes.clone(),
        })
    }
}

/// Attaches labels to candidates. Repeating an identical label is allowed;
/// two different labels for one candidate are a conflict.
pub fn import_labels(candidates: &mut [CandidateRecord], labels: &[LabelLine]) -> Result<usize> {
    let index: HashMap<&str, usize> = candidates
        .iter()
        .enumerate()
        .map(|(i, c)| (c.candidate_id.as_str(), i))
        .collect();
    let mut parsed: Vec<(usize, Label)> = Vec::with_capacity(labels.len());
    for line in labels {
        let &i = index
            .get(line.candidate_id.as_str())
            .ok_or_else(|| Error::UnknownCandidate(line.candidate_id.clone()))?;
        parsed.push((i, line.to_label()?));
    }
    let mut assigned: HashMap<usize, &Label> = HashMap::new();
    for (i, label) in &parsed {
        if let Some(prev) = assigned.insert(*i, label) {
            if prev != label {
                return Err(Error::LabelConflict(candidates[*i].candidate_id.clone()));
            }
        }
    }
    let count = assigned.len();
    for (i, label) in parsed {
        candidates[i].label = Some(label);
    }
    Ok(count)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn taxonomy_is_closed_and_roundtrips() {
        assert_eq!(Category::ALL.len(), 21);
        for c in Category::ALL {
            assert_eq!(c.slug().parse::<Category>().unwrap(), *c);
            assert_eq!(serde_json::to_string(c).unwrap(), format!("\"{}\"", c.slug()));
        }
        assert!(matches!("gossip".parse::<Category>(), Err(Error::InvalidCategory(_))));
        let pii: Vec<_> = Category::ALL.iter().filter(|c| c.is_pii()).collect();
        assert_eq!(pii.len(), 2);
    }

    #[test]
    fn label_line_json_shape() {
        let line: LabelLine = serde_json::from_str(
            r#"{"candidate_id":"top_n-zlib-0001","verdict":"memorized","categories":["code","valid_urls"]}"#,
        )
        .unwrap();
        let label = line.to_label().unwrap();
        assert_eq!(label.verdict, Verdict::Memorized);
        assert_eq!(label.categories.len(), 2);
        assert_eq!(label.notes, "");
    }
}
