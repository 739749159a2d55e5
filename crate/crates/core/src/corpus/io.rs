use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{
    tokenize_char, EmotionCategory, Granularity, Record, MAX_SENTENCES, MAX_SENTENCE_TOKENS,
};
use crate::error::{Error, Result};

#[derive(Serialize, Deserialize)]
struct Line<'a> {
    article: Vec<String>,
    comment: String,
    #[serde(borrow)]
    emotion: std::borrow::Cow<'a, str>,
}

/// Reads a line-delimited JSON corpus, truncating over-long articles.
pub fn load_corpus(path: impl AsRef<Path>) -> Result<Vec<Record>> {
    let file = File::open(path)?;
    parse_corpus(BufReader::new(file))
}

pub fn parse_corpus(reader: impl BufRead) -> Result<Vec<Record>> {
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let lineno = i + 1;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let parsed: Line = serde_json::from_str(&line).map_err(|e| Error::Parse {
            line: lineno,
            msg: e.to_string(),
        })?;
        let emotion = EmotionCategory::parse_any(&parsed.emotion)
            .map_err(|e| Error::Data(format!("line {lineno}: {e}")))?;
        let mut article = parsed.article;
        if article.len() > MAX_SENTENCES {
            log::warn!(
                "line {lineno}: article truncated from {} to {MAX_SENTENCES} sentences",
                article.len()
            );
            article.truncate(MAX_SENTENCES);
        }
        for sentence in &mut article {
            let tokens = tokenize_char(sentence);
            if tokens.len() > MAX_SENTENCE_TOKENS {
                log::warn!(
                    "line {lineno}: sentence truncated from {} to {MAX_SENTENCE_TOKENS} tokens",
                    tokens.len()
                );
                *sentence = tokens[..MAX_SENTENCE_TOKENS].concat();
            }
        }
        article.retain(|s| !tokenize_char(s).is_empty());
        if article.is_empty() {
            return Err(Error::Data(format!(
                "line {lineno}: article has no non-empty sentence"
            )));
        }
        out.push(Record {
            article,
            comment: parsed.comment,
            emotion,
        });
    }
    Ok(out)
}

pub fn write_corpus(records: &[Record], mut writer: impl Write) -> Result<()> {
    for r in records {
        let line = Line {
            article: r.article.clone(),
            comment: r.comment.clone(),
            emotion: r.emotion.name().into(),
        };
        serde_json::to_writer(&mut writer, &line)?;
        writer.write_all(b"\n")?;
    }
    writer.flush()?;
    Ok(())
}

pub fn save_corpus(records: &[Record], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let tmp = path.with_extension("tmp");
    write_corpus(records, BufWriter::new(File::create(&tmp)?))?;
    fs::rename(tmp, path)?;
    Ok(())
}

/// The single granularity shared by every record.
pub fn corpus_granularity(records: &[Record]) -> Result<Granularity> {
    let first = records
        .first()
        .ok_or_else(|| Error::Data("empty corpus".into()))?
        .emotion
        .granularity();
    if let Some(pos) = records
        .iter()
        .position(|r| r.emotion.granularity() != first)
    {
        return Err(Error::Data(format!(
            "record {} mixes emotion granularities ({first} expected)",
            pos + 1
        )));
    }
    Ok(first)
}
