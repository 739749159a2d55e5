//! Character-level corpus handling: vocabulary, line-delimited JSON corpus
//! files, truncation, batching and the synthetic emotional corpus.

mod batch;
mod io;
mod synth;
mod vocab;

pub use batch::{make_batches, Batch};
pub use io::{corpus_granularity, load_corpus, parse_corpus, save_corpus, write_corpus};
pub use synth::{lexicon, synth_corpus, ENTITIES};
pub use vocab::{build_vocab, tokenize_char, Vocab, BOS, EOS, PAD, UNK};

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Sentences kept per article.
pub const MAX_SENTENCES: usize = 30;
/// Tokens kept per sentence.
pub const MAX_SENTENCE_TOKENS: usize = 80;

const COARSE_LABELS: [&str; 2] = ["Positive", "Negative"];
const FINE_LABELS: [&str; 5] = ["Anger", "Disgust", "Like", "Happiness", "Sadness"];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Granularity {
    Coarse,
    Fine,
}

impl Granularity {
    pub fn labels(self) -> &'static [&'static str] {
        match self {
            Granularity::Coarse => &COARSE_LABELS,
            Granularity::Fine => &FINE_LABELS,
        }
    }

    pub fn n_labels(self) -> usize {
        self.labels().len()
    }

    pub fn all_categories(self) -> impl Iterator<Item = EmotionCategory> {
        (0..self.n_labels()).map(move |label| EmotionCategory {
            granularity: self,
            label,
        })
    }
}

impl std::str::FromStr for Granularity {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "coarse" => Ok(Granularity::Coarse),
            "fine" => Ok(Granularity::Fine),
            _ => Err(Error::Config(format!(
                "unknown granularity {s:?}; expected coarse or fine"
            ))),
        }
    }
}

impl fmt::Display for Granularity {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Granularity::Coarse => "coarse",
            Granularity::Fine => "fine",
        })
    }
}

/// Emotion tag: an index into the label set of its granularity.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct EmotionCategory {
    granularity: Granularity,
    label: usize,
}

impl EmotionCategory {
    pub fn new(granularity: Granularity, label: usize) -> Result<Self> {
        if label >= granularity.n_labels() {
            return Err(Error::Data(format!(
                "label index {label} out of range for {granularity} emotions"
            )));
        }
        Ok(Self { granularity, label })
    }

    /// Case-insensitive label lookup within one granularity.
    pub fn parse(granularity: Granularity, name: &str) -> Result<Self> {
        granularity
            .labels()
            .iter()
            .position(|l| l.eq_ignore_ascii_case(name.trim()))
            .map(|label| Self { granularity, label })
            .ok_or_else(|| {
                Error::Data(format!(
                    "unknown {granularity} emotion {name:?}; valid labels: {}",
                    granularity.labels().join(", ")
                ))
            })
    }

    /// Label lookup across both granularities (label names are disjoint).
    pub fn parse_any(name: &str) -> Result<Self> {
        Self::parse(Granularity::Fine, name)
            .or_else(|_| Self::parse(Granularity::Coarse, name))
            .map_err(|_| {
                Error::Data(format!(
                    "unknown emotion {name:?}; valid labels: {}, {}",
                    FINE_LABELS.join(", "),
                    COARSE_LABELS.join(", ")
                ))
            })
    }

    pub fn granularity(self) -> Granularity {
        self.granularity
    }

    pub fn label(self) -> usize {
        self.label
    }

    pub fn name(self) -> &'static str {
        self.granularity.labels()[self.label]
    }
}

impl fmt::Display for EmotionCategory {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// One article/comment pair as stored in a corpus file.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Record {
    pub article: Vec<String>,
    pub comment: String,
    pub emotion: EmotionCategory,
}

/// A record mapped to vocabulary ids.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Example {
    pub article: Vec<Vec<usize>>,
    /// `BOS, tokens.., EOS`
    pub comment: Vec<usize>,
    pub emotion: EmotionCategory,
}

impl Example {
    /// Encodes a record, enforcing the sentence and token caps.
    pub fn encode(record: &Record, vocab: &Vocab) -> Result<Self> {
        let article: Vec<Vec<usize>> = record
            .article
            .iter()
            .take(MAX_SENTENCES)
            .map(|s| {
                let mut ids = vocab.encode_text(s);
                ids.truncate(MAX_SENTENCE_TOKENS);
                ids
            })
            .filter(|ids| !ids.is_empty())
            .collect();
        if article.is_empty() {
            return Err(Error::Data("article has no non-empty sentence".into()));
        }
        let mut comment = vec![BOS];
        comment.extend(vocab.encode_text(&record.comment));
        comment.push(EOS);
        Ok(Self {
            article,
            comment,
            emotion: record.emotion,
        })
    }

    pub fn encode_all(records: &[Record], vocab: &Vocab) -> Result<Vec<Self>> {
        records.iter().map(|r| Self::encode(r, vocab)).collect()
    }

    /// Comment tokens without BOS/EOS.
    pub fn comment_body(&self) -> &[usize] {
        let end = self.comment.len().saturating_sub(1);
        &self.comment[1.min(end)..end]
    }
}
