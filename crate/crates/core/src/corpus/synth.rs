//! Synthetic emotional corpus.
//!
//! The script is spaceless ASCII where every character is a word, mirroring
//! a character-level corpus in a logographic language:
//!
//! * entities are uppercase letters; each article sentence opens with one,
//! * sentence bodies are lowercase letters terminated by `.`,
//! * comments mention the entity that opens the article's first sentence and
//!   carry a run of one character from the emotion's lexicon. Lexicons are
//!   disjoint symbol sets, and a run may repeat its character for emphasis.

use super::{EmotionCategory, Granularity, Record};
use crate::error::{Error, Result};
use crate::tensor::Rng;

pub const ENTITIES: &str = "ABCDEFGHIJKLMNOPQRSTUVWXYZ";
const BODY: &str = "abcdefghijklmnopqrstuvwxyz";
const OPENERS: [&str; 3] = ["", "o", "wu"];
const LINKS: [&str; 3] = ["i", "sv", "ka"];
const CLOSERS: [&str; 3] = ["", ".", "ne"];
/// Probability of an emphasis run of length 1 to 5. Long runs dominate, as
/// with laughter or exclamation runs in real comments.
const RUN_LENGTHS: [f64; 5] = [0.1, 0.15, 0.25, 0.3, 0.2];

const FINE_LEXICONS: [&str; 5] = ["!#$", "%&*", "+<=", ">@^", "~|?"];
const COARSE_LEXICONS: [&str; 2] = ["+@^", "#%~"];

/// Characters that signal `emotion` in synthetic comments.
pub fn lexicon(emotion: EmotionCategory) -> &'static str {
    match emotion.granularity() {
        Granularity::Fine => FINE_LEXICONS[emotion.label()],
        Granularity::Coarse => COARSE_LEXICONS[emotion.label()],
    }
}

fn pick(rng: &mut Rng, chars: &str) -> char {
    let n = chars.chars().count();
    chars.chars().nth(rng.below(n)).expect("non-empty pool")
}

fn sentence(rng: &mut Rng, entity: char) -> String {
    let len = 3 + rng.below(4);
    let mut s = String::with_capacity(len + 2);
    s.push(entity);
    for _ in 0..len {
        s.push(pick(rng, BODY));
    }
    s.push('.');
    s
}

fn run_length(rng: &mut Rng) -> usize {
    let mut u = rng.next_f64();
    for (i, p) in RUN_LENGTHS.iter().enumerate() {
        if u < *p {
            return i + 1;
        }
        u -= p;
    }
    RUN_LENGTHS.len()
}

/// Comment for an article whose first sentence opens with `entity`.
fn comment(rng: &mut Rng, entity: char, emotion: EmotionCategory) -> String {
    let mut c = String::new();
    c.push_str(OPENERS[rng.below(OPENERS.len())]);
    c.push(entity);
    c.push_str(LINKS[rng.below(LINKS.len())]);
    let mark = pick(rng, lexicon(emotion));
    for _ in 0..run_length(rng) {
        c.push(mark);
    }
    c.push_str(CLOSERS[rng.below(CLOSERS.len())]);
    c
}

/// Random article of 2 to 4 sentences. Returns the sentences and the entity
/// that opens the first one.
pub(crate) fn article(rng: &mut Rng) -> (Vec<String>, char) {
    let n = 2 + rng.below(3);
    let main = pick(rng, ENTITIES);
    let mut sentences = vec![sentence(rng, main)];
    for _ in 1..n {
        let e = pick(rng, ENTITIES);
        sentences.push(sentence(rng, e));
    }
    (sentences, main)
}

/// `n` examples with emotions assigned round-robin over the label set.
pub fn synth_corpus(rng: &mut Rng, n: usize, granularity: Granularity) -> Result<Vec<Record>> {
    if n == 0 {
        return Err(Error::Config(
            "synthetic corpus needs at least one example".into(),
        ));
    }
    let labels = granularity.n_labels();
    (0..n)
        .map(|i| {
            let emotion = EmotionCategory::new(granularity, i % labels)?;
            let (article, main) = article(rng);
            let comment = comment(rng, main, emotion);
            Ok(Record {
                article,
                comment,
                emotion,
            })
        })
        .collect()
}
