//! Metrics: diversity, within-comment repetition, BLEU, ROUGE-L and emotion
//! accuracy through a naive Bayes tagger.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::corpus::{tokenize_char, EmotionCategory, Granularity};
use crate::error::{Error, Result};

fn check_n(n: usize) -> Result<()> {
    if n == 0 {
        return Err(Error::Usage("n-gram order must be at least 1".into()));
    }
    Ok(())
}

fn check_aligned(a: usize, b: usize, what: &str) -> Result<()> {
    if a != b {
        return Err(Error::Usage(format!("{what}: {a} items against {b}")));
    }
    Ok(())
}

/// Corpus-wide distinct n-gram ratio.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Distinct {
    pub unique: usize,
    pub total: usize,
}

impl Distinct {
    /// `unique / total`, or 0 when no n-gram exists.
    pub fn ratio(&self) -> f64 {
        if self.total == 0 {
            0.0
        } else {
            self.unique as f64 / self.total as f64
        }
    }

    pub fn is_defined(&self) -> bool {
        self.total > 0
    }
}

pub fn distinct_n<T: Ord + Clone>(texts: &[Vec<T>], n: usize) -> Result<Distinct> {
    check_n(n)?;
    let mut seen = BTreeSet::new();
    let mut total = 0;
    for text in texts {
        for gram in text.windows(n) {
            total += 1;
            seen.insert(gram.to_vec());
        }
    }
    Ok(Distinct {
        unique: seen.len(),
        total,
    })
}

/// Mean of the per-text distinct ratios, over texts with at least one n-gram.
pub fn distinct_n_per_text<T: Ord + Clone>(texts: &[Vec<T>], n: usize) -> Result<f64> {
    let mut sum = 0.0;
    let mut count = 0;
    for text in texts {
        let d = distinct_n(std::slice::from_ref(text), n)?;
        if d.is_defined() {
            sum += d.ratio();
            count += 1;
        }
    }
    Ok(if count == 0 { 0.0 } else { sum / count as f64 })
}

/// Fraction of n-gram positions in `text` whose n-gram occurred earlier in
/// the same text. `None` when the text is shorter than `n`.
pub fn repetition_rate<T: Ord + Clone>(text: &[T], n: usize) -> Result<Option<f64>> {
    check_n(n)?;
    if text.len() < n {
        return Ok(None);
    }
    let mut seen = BTreeSet::new();
    let mut repeated = 0;
    let positions = text.len() + 1 - n;
    for gram in text.windows(n) {
        if !seen.insert(gram) {
            repeated += 1;
        }
    }
    Ok(Some(repeated as f64 / positions as f64))
}

/// Mean repetition rate over the texts long enough to contain an n-gram.
pub fn repetitive_ngram_rate<T: Ord + Clone>(texts: &[Vec<T>], n: usize) -> Result<f64> {
    let mut sum = 0.0;
    let mut count = 0;
    for text in texts {
        if let Some(r) = repetition_rate(text, n)? {
            sum += r;
            count += 1;
        }
    }
    Ok(if count == 0 { 0.0 } else { sum / count as f64 })
}

fn ngram_counts<T: Ord + Clone>(text: &[T], n: usize) -> BTreeMap<&[T], usize> {
    let mut counts = BTreeMap::new();
    for gram in text.windows(n) {
        *counts.entry(gram).or_insert(0) += 1;
    }
    counts
}

/// Corpus BLEU with clipped n-gram precisions and brevity penalty.
///
/// Unigram precision is unsmoothed; orders 2 and up use `(m + 1) / (c + 1)`.
/// The brevity penalty is `exp(1 - r / c)` when the total candidate length
/// `c` is below the total reference length `r`.
pub fn bleu<T: Ord + Clone>(
    candidates: &[Vec<T>],
    references: &[Vec<T>],
    max_n: usize,
) -> Result<f64> {
    check_aligned(candidates.len(), references.len(), "bleu")?;
    check_n(max_n)?;
    let mut matched = vec![0usize; max_n];
    let mut possible = vec![0usize; max_n];
    let (mut c_len, mut r_len) = (0usize, 0usize);
    for (cand, refr) in candidates.iter().zip(references) {
        c_len += cand.len();
        r_len += refr.len();
        for n in 1..=max_n {
            let rc = ngram_counts(refr, n);
            for (gram, count) in ngram_counts(cand, n) {
                matched[n - 1] += count.min(rc.get(gram).copied().unwrap_or(0));
                possible[n - 1] += count;
            }
        }
    }
    if c_len == 0 || matched[0] == 0 {
        return Ok(0.0);
    }
    let mut log_sum = 0.0;
    for n in 0..max_n {
        let p = if n == 0 {
            matched[0] as f64 / possible[0] as f64
        } else {
            (matched[n] as f64 + 1.0) / (possible[n] as f64 + 1.0)
        };
        log_sum += p.ln();
    }
    let bp = if c_len >= r_len {
        1.0
    } else {
        (1.0 - r_len as f64 / c_len as f64).exp()
    };
    Ok(bp * (log_sum / max_n as f64).exp())
}

/// Length of the longest common subsequence.
pub fn lcs_len<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y {
                prev[j] + 1
            } else {
                cur[j].max(prev[j + 1])
            };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

pub const ROUGE_BETA: f64 = 1.2;

/// LCS-based F-measure for one pair.
pub fn rouge_l_pair<T: PartialEq>(candidate: &[T], reference: &[T]) -> f64 {
    let lcs = lcs_len(candidate, reference);
    if lcs == 0 {
        return 0.0;
    }
    let r = lcs as f64 / reference.len() as f64;
    let p = lcs as f64 / candidate.len() as f64;
    let b2 = ROUGE_BETA * ROUGE_BETA;
    (1.0 + b2) * r * p / (r + b2 * p)
}

/// Mean pairwise ROUGE-L.
pub fn rouge_l<T: PartialEq>(candidates: &[Vec<T>], references: &[Vec<T>]) -> Result<f64> {
    check_aligned(candidates.len(), references.len(), "rouge_l")?;
    if candidates.is_empty() {
        return Ok(0.0);
    }
    let sum: f64 = candidates
        .iter()
        .zip(references)
        .map(|(c, r)| rouge_l_pair(c, r))
        .sum();
    Ok(sum / candidates.len() as f64)
}

/// Multinomial naive Bayes over comment tokens with add-one smoothing and
/// no class prior.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EmotionTagger {
    pub granularity: Granularity,
    /// Per token, the log-likelihood under each label.
    pub log_likelihood: BTreeMap<String, Vec<f64>>,
}

impl EmotionTagger {
    pub fn train<'a>(
        granularity: Granularity,
        labeled: impl IntoIterator<Item = (&'a str, EmotionCategory)>,
    ) -> Result<Self> {
        let n_labels = granularity.n_labels();
        let mut counts: BTreeMap<String, Vec<usize>> = BTreeMap::new();
        let mut totals = vec![0usize; n_labels];
        let mut covered = vec![false; n_labels];
        for (text, emotion) in labeled {
            if emotion.granularity() != granularity {
                return Err(Error::Data(format!(
                    "tagger for {granularity} labels got {} label {emotion}",
                    emotion.granularity()
                )));
            }
            let l = emotion.label();
            covered[l] = true;
            for tok in tokenize_char(text) {
                counts.entry(tok).or_insert_with(|| vec![0; n_labels])[l] += 1;
                totals[l] += 1;
            }
        }
        if let Some(missing) = covered.iter().position(|c| !c) {
            return Err(Error::Data(format!(
                "no training comment for label {}",
                granularity.labels()[missing]
            )));
        }
        let v = counts.len() as f64;
        let log_likelihood = counts
            .into_iter()
            .map(|(tok, c)| {
                let ll = c
                    .iter()
                    .zip(&totals)
                    .map(|(&k, &t)| ((k as f64 + 1.0) / (t as f64 + v)).ln())
                    .collect();
                (tok, ll)
            })
            .collect();
        Ok(Self {
            granularity,
            log_likelihood,
        })
    }

    /// Per-label log scores; tokens never seen in training are ignored.
    pub fn scores(&self, text: &str) -> Vec<f64> {
        let mut s = vec![0.0; self.granularity.n_labels()];
        for tok in tokenize_char(text) {
            if let Some(ll) = self.log_likelihood.get(&tok) {
                for (a, b) in s.iter_mut().zip(ll) {
                    *a += b;
                }
            }
        }
        s
    }

    /// Highest-scoring label, ties to the lower label index.
    pub fn tag(&self, text: &str) -> EmotionCategory {
        let s = self.scores(text);
        let mut best = 0;
        for (i, &v) in s.iter().enumerate() {
            if v > s[best] {
                best = i;
            }
        }
        EmotionCategory::new(self.granularity, best).expect("label index within granularity")
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EmotionAccuracy {
    /// Accuracy among requests for each label that was requested.
    pub per_label: BTreeMap<String, f64>,
    /// Mean of `per_label`.
    pub mean: f64,
}

/// Agreement between requested emotions and the tagger's predictions,
/// averaged over labels.
pub fn emotion_accuracy(
    tag: impl Fn(&str) -> EmotionCategory,
    generated: &[String],
    requested: &[EmotionCategory],
) -> Result<EmotionAccuracy> {
    check_aligned(generated.len(), requested.len(), "emotion_accuracy")?;
    let mut hits: BTreeMap<(usize, String), (usize, usize)> = BTreeMap::new();
    for (text, want) in generated.iter().zip(requested) {
        let e = hits
            .entry((want.label(), want.name().to_string()))
            .or_insert((0, 0));
        e.1 += 1;
        if tag(text) == *want {
            e.0 += 1;
        }
    }
    let per_label: BTreeMap<String, f64> = hits
        .into_iter()
        .map(|((_, name), (h, n))| (name, h as f64 / n as f64))
        .collect();
    let mean = if per_label.is_empty() {
        0.0
    } else {
        per_label.values().sum::<f64>() / per_label.len() as f64
    };
    Ok(EmotionAccuracy { per_label, mean })
}

/// Every metric for one system, in a fixed key order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub bleu: f64,
    pub rouge_l: f64,
    #[serde(rename = "D1")]
    pub d1: f64,
    #[serde(rename = "D2")]
    pub d2: f64,
    #[serde(rename = "D3")]
    pub d3: f64,
    /// `rep_1` .. `rep_4`: mean within-comment repetition rates.
    pub rep: BTreeMap<String, f64>,
    pub emotion_acc: Option<f64>,
    pub emotion_per_label: BTreeMap<String, f64>,
    pub comments: usize,
    pub tokens: usize,
}

pub const REP_ORDERS: [usize; 4] = [1, 2, 3, 4];

impl MetricReport {
    /// Computes the report for generated comments against references.
    /// Emotion accuracy is included when a tagger and requested labels are
    /// given.
    pub fn compute(
        generated: &[String],
        references: &[String],
        emotion: Option<(&EmotionTagger, &[EmotionCategory])>,
    ) -> Result<Self> {
        check_aligned(generated.len(), references.len(), "metric report")?;
        let cand: Vec<Vec<String>> = generated.iter().map(|t| tokenize_char(t)).collect();
        let refs: Vec<Vec<String>> = references.iter().map(|t| tokenize_char(t)).collect();
        let mut rep = BTreeMap::new();
        for n in REP_ORDERS {
            rep.insert(format!("rep_{n}"), repetitive_ngram_rate(&cand, n)?);
        }
        let (emotion_acc, emotion_per_label) = match emotion {
            Some((tagger, requested)) => {
                let acc = emotion_accuracy(|t| tagger.tag(t), generated, requested)?;
                (Some(acc.mean), acc.per_label)
            }
            None => (None, BTreeMap::new()),
        };
        Ok(Self {
            bleu: bleu(&cand, &refs, 4)?,
            rouge_l: rouge_l(&cand, &refs)?,
            d1: distinct_n(&cand, 1)?.ratio(),
            d2: distinct_n(&cand, 2)?.ratio(),
            d3: distinct_n(&cand, 3)?.ratio(),
            rep,
            emotion_acc,
            emotion_per_label,
            comments: generated.len(),
            tokens: cand.iter().map(Vec::len).sum(),
        })
    }

    pub fn rep(&self, n: usize) -> f64 {
        self.rep.get(&format!("rep_{n}")).copied().unwrap_or(0.0)
    }
}

/// Aligned text table, one row per system, grouped as quality, diversity,
/// repetition and emotion.
pub fn render_table(rows: &[(String, MetricReport)]) -> String {
    let name_w = rows.iter().map(|(n, _)| n.len()).max().unwrap_or(6).max(6);
    let mut out = String::new();
    let _ = writeln!(
        out,
        "{:<name_w$} | {:>6} {:>7} | {:>6} {:>6} {:>6} | {:>6} {:>6} {:>6} | {:>7}",
        "system", "BLEU", "ROUGE-L", "D1", "D2", "D3", "rep_1", "rep_2", "rep_3", "EmoAcc"
    );
    let _ = writeln!(out, "{}", "-".repeat(name_w + 84));
    for (name, r) in rows {
        let emo = r
            .emotion_acc
            .map(|a| format!("{:.2}", 100.0 * a))
            .unwrap_or_else(|| "-".into());
        let _ = writeln!(
            out,
            "{:<name_w$} | {:>6.2} {:>7.2} | {:>6.2} {:>6.2} {:>6.2} | {:>6.2} {:>6.2} {:>6.2} | {:>7}",
            name,
            100.0 * r.bleu,
            100.0 * r.rouge_l,
            100.0 * r.d1,
            100.0 * r.d2,
            100.0 * r.d3,
            100.0 * r.rep(1),
            100.0 * r.rep(2),
            100.0 * r.rep(3),
            emo
        );
    }
    out
}
