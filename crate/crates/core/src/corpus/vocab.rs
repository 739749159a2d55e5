use std::collections::HashMap;
use std::fs;
use std::path::Path;

use sha2::{Digest, Sha256};

use super::Record;
use crate::error::{Error, Result};

pub const PAD: usize = 0;
pub const UNK: usize = 1;
pub const BOS: usize = 2;
pub const EOS: usize = 3;
const RESERVED: [&str; 4] = ["<pad>", "<unk>", "<s>", "</s>"];

/// One token per character; each run of whitespace becomes a single `" "`.
pub fn tokenize_char(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut in_space = false;
    for ch in text.chars() {
        if ch.is_whitespace() {
            if !in_space {
                out.push(" ".to_string());
            }
            in_space = true;
        } else {
            out.push(ch.to_string());
            in_space = false;
        }
    }
    out
}

/// Shared article/comment vocabulary with reserved ids `0..4`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocab {
    tokens: Vec<String>,
    ids: HashMap<String, usize>,
}

impl Vocab {
    fn from_tokens(regular: Vec<String>) -> Result<Self> {
        let mut tokens: Vec<String> = RESERVED.iter().map(|s| s.to_string()).collect();
        tokens.extend(regular);
        let mut ids = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if ids.insert(t.clone(), i).is_some() {
                return Err(Error::Data(format!("duplicate vocabulary token {t:?}")));
            }
        }
        Ok(Self { tokens, ids })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Id of `token`, or `UNK`.
    pub fn encode(&self, token: &str) -> usize {
        self.ids.get(token).copied().unwrap_or(UNK)
    }

    pub fn encode_text(&self, text: &str) -> Vec<usize> {
        tokenize_char(text).iter().map(|t| self.encode(t)).collect()
    }

    pub fn decode(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    /// Renders ids as text, stopping at EOS and skipping PAD/BOS.
    pub fn decode_text(&self, ids: &[usize]) -> String {
        let mut s = String::new();
        for &id in ids {
            match id {
                EOS => break,
                PAD | BOS => {}
                _ => s.push_str(self.decode(id).unwrap_or(RESERVED[UNK])),
            }
        }
        s
    }

    /// Hex SHA-256 over the token list; identifies a vocabulary in checkpoints.
    pub fn hash(&self) -> String {
        let mut h = Sha256::new();
        for t in &self.tokens {
            h.update(t.as_bytes());
            h.update([0u8]);
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }

    /// One regular token per line; line `i` holds id `i + 4`.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut s = String::new();
        for t in &self.tokens[RESERVED.len()..] {
            s.push_str(t);
            s.push('\n');
        }
        fs::write(path, s)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        let body = text.strip_suffix('\n').unwrap_or(&text);
        if body.is_empty() {
            return Self::from_tokens(Vec::new());
        }
        let mut tokens = Vec::new();
        for (i, line) in body.split('\n').enumerate() {
            if line.is_empty() {
                return Err(Error::Parse {
                    line: i + 1,
                    msg: "empty vocabulary entry".into(),
                });
            }
            tokens.push(line.to_string());
        }
        Self::from_tokens(tokens)
    }
}

/// Frequency-ranked vocabulary over articles and comments jointly. Ties are
/// broken lexicographically; at most `max_size - 4` regular tokens are kept.
pub fn build_vocab(records: &[Record], max_size: usize) -> Result<Vocab> {
    if records.is_empty() {
        return Err(Error::Data(
            "cannot build a vocabulary from an empty corpus".into(),
        ));
    }
    let mut counts: HashMap<String, usize> = HashMap::new();
    for r in records {
        for text in r.article.iter().chain(std::iter::once(&r.comment)) {
            for t in tokenize_char(text) {
                *counts.entry(t).or_default() += 1;
            }
        }
    }
    let mut ranked: Vec<(String, usize)> = counts
        .into_iter()
        .filter(|(t, _)| !RESERVED.contains(&t.as_str()))
        .collect();
    ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    ranked.truncate(max_size.saturating_sub(RESERVED.len()));
    Vocab::from_tokens(ranked.into_iter().map(|(t, _)| t).collect())
}
