//! Inference-time search: greedy, beam, restricted beam and hard no-repeat.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::corpus::{EmotionCategory, BOS, EOS};
use crate::decoder::{decode_step, DecoderState, Overrides};
use crate::encoder::{encode_article, EncodedArticle};
use crate::error::{Error, Result};
use crate::model::{Dropout, Model};
use crate::tensor::{Graph, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SearchMode {
    Greedy,
    Beam,
    Rbs,
    #[serde(alias = "hard")]
    HardNorepeat,
}

impl FromStr for SearchMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "greedy" => Ok(Self::Greedy),
            "beam" => Ok(Self::Beam),
            "rbs" => Ok(Self::Rbs),
            "hard" | "hard_norepeat" | "hard-norepeat" => Ok(Self::HardNorepeat),
            _ => Err(Error::Config(format!(
                "unknown decoding mode {s:?}; expected greedy, beam, rbs or hard"
            ))),
        }
    }
}

impl fmt::Display for SearchMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Greedy => "greedy",
            Self::Beam => "beam",
            Self::Rbs => "rbs",
            Self::HardNorepeat => "hard",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SearchConfig {
    pub beam_size: usize,
    pub max_len: usize,
    /// n-gram order for repetition penalties.
    pub n: usize,
    pub eta: f64,
    pub mode: SearchMode,
    /// Rank finished hypotheses by mean rather than total log-probability.
    pub length_norm: bool,
}

impl Default for SearchConfig {
    fn default() -> Self {
        Self {
            beam_size: 5,
            max_len: 30,
            n: 1,
            eta: 0.5,
            mode: SearchMode::Rbs,
            length_norm: true,
        }
    }
}

impl SearchConfig {
    pub fn validate(&self) -> Result<()> {
        if self.beam_size == 0 {
            return Err(Error::Config("beam size must be at least 1".into()));
        }
        if self.n == 0 {
            return Err(Error::Config("n-gram order must be at least 1".into()));
        }
        if self.eta.is_nan() || self.eta < 0.0 {
            return Err(Error::Config(format!(
                "penalty {} must be non-negative",
                self.eta
            )));
        }
        if self.max_len == 0 {
            return Err(Error::Config("max_len must be at least 1".into()));
        }
        Ok(())
    }
}

/// Lowers `p` by `count * eta`, never below zero.
pub fn rbs_adjust(p: f64, count: usize, eta: f64) -> f64 {
    if count == 0 {
        p
    } else {
        (p - count as f64 * eta).max(0.0)
    }
}

/// Source of next-token distributions for the search.
pub trait StepScorer {
    type State: Clone;

    fn initial(&mut self) -> Result<Self::State>;

    /// Distribution over the vocabulary after feeding `prev`.
    fn step(&mut self, state: &Self::State, prev: usize) -> Result<(Vec<f64>, Self::State)>;

    fn bos(&self) -> usize {
        BOS
    }

    /// End-of-sequence id; `None` means sequences only end at `max_len`.
    fn eos(&self) -> Option<usize> {
        Some(EOS)
    }
}

#[derive(Clone, Debug)]
pub struct Hypothesis<S> {
    /// Emitted tokens, including the final EOS when finished.
    pub tokens: Vec<usize>,
    /// Sum of unadjusted step log-probabilities.
    pub log_prob: f64,
    /// Sum of the log-probabilities the search actually used.
    pub score: f64,
    pub state: S,
    pub ngram_counts: BTreeMap<Vec<usize>, usize>,
    pub finished: bool,
}

impl<S> Hypothesis<S> {
    fn new(state: S) -> Self {
        Self {
            tokens: Vec::new(),
            log_prob: 0.0,
            score: 0.0,
            state,
            ngram_counts: BTreeMap::new(),
            finished: false,
        }
    }

    /// How often the n-gram closed by `token` already occurs.
    pub fn repeat_count(&self, token: usize, n: usize) -> usize {
        match ngram_ending(&self.tokens, token, n) {
            Some(gram) => self.ngram_counts.get(&gram).copied().unwrap_or(0),
            None => 0,
        }
    }

    /// Score used for the final ranking.
    pub fn ranking_score(&self, length_norm: bool) -> f64 {
        if length_norm && !self.tokens.is_empty() {
            self.score / self.tokens.len() as f64
        } else {
            self.score
        }
    }

    /// Tokens without the trailing EOS.
    pub fn body(&self, eos: Option<usize>) -> &[usize] {
        match (self.tokens.last(), eos) {
            (Some(&t), Some(e)) if t == e && self.finished => &self.tokens[..self.tokens.len() - 1],
            _ => &self.tokens,
        }
    }
}

impl<S: Clone> Hypothesis<S> {
    fn extend(
        &self,
        token: usize,
        p_raw: f64,
        p_used: f64,
        state: S,
        n: usize,
        finished: bool,
    ) -> Self {
        let mut ngram_counts = self.ngram_counts.clone();
        if let Some(gram) = ngram_ending(&self.tokens, token, n) {
            *ngram_counts.entry(gram).or_insert(0) += 1;
        }
        let mut tokens = self.tokens.clone();
        tokens.push(token);
        Self {
            tokens,
            log_prob: self.log_prob + p_raw.ln(),
            score: self.score + p_used.ln(),
            state,
            ngram_counts,
            finished,
        }
    }
}

fn ngram_ending(tokens: &[usize], token: usize, n: usize) -> Option<Vec<usize>> {
    if tokens.len() + 1 < n {
        return None;
    }
    let mut gram = tokens[tokens.len() + 1 - n..].to_vec();
    gram.push(token);
    Some(gram)
}

/// Counts every n-gram of `tokens`.
pub fn count_ngrams(tokens: &[usize], n: usize) -> BTreeMap<Vec<usize>, usize> {
    let mut counts = BTreeMap::new();
    if n > 0 && tokens.len() >= n {
        for w in tokens.windows(n) {
            *counts.entry(w.to_vec()).or_insert(0) += 1;
        }
    }
    counts
}

#[derive(Clone, Debug)]
pub struct SearchResult<S> {
    /// Best first.
    pub hypotheses: Vec<Hypothesis<S>>,
    /// True when no hypothesis reached EOS and the live beam was returned.
    pub unfinished: bool,
}

impl<S> SearchResult<S> {
    pub fn best(&self) -> &Hypothesis<S> {
        &self.hypotheses[0]
    }
}

/// Runs the search selected by `cfg.mode`.
pub fn search<M: StepScorer>(scorer: &mut M, cfg: &SearchConfig) -> Result<SearchResult<M::State>> {
    cfg.validate()?;
    match cfg.mode {
        SearchMode::Greedy => greedy(scorer, cfg.max_len),
        _ => beam_search(scorer, cfg),
    }
}

/// Picks the most likely token at every step, ties to the lower id.
pub fn greedy<M: StepScorer>(scorer: &mut M, max_len: usize) -> Result<SearchResult<M::State>> {
    let eos = scorer.eos();
    let mut hyp = Hypothesis::new(scorer.initial()?);
    let mut prev = scorer.bos();
    while hyp.tokens.len() < max_len {
        let (dist, state) = scorer.step(&hyp.state, prev)?;
        let (best, &p) = dist
            .iter()
            .enumerate()
            .fold(None, |acc: Option<(usize, &f64)>, (i, p)| match acc {
                Some((_, bp)) if bp >= p => acc,
                _ => Some((i, p)),
            })
            .ok_or_else(|| Error::Internal("empty step distribution".into()))?;
        let done = Some(best) == eos;
        hyp = hyp.extend(best, p, p, state, 1, done);
        prev = best;
        if done {
            break;
        }
    }
    let unfinished = !hyp.finished;
    if unfinished && eos.is_some() {
        log::warn!("greedy decoding stopped at max_len {max_len} without EOS");
    }
    Ok(SearchResult {
        hypotheses: vec![hyp],
        unfinished,
    })
}

/// Beam search; `cfg.mode` selects plain, restricted or hard no-repeat.
pub fn beam_search<M: StepScorer>(
    scorer: &mut M,
    cfg: &SearchConfig,
) -> Result<SearchResult<M::State>> {
    cfg.validate()?;
    let eos = scorer.eos();
    let bos = scorer.bos();
    let mut live = vec![Hypothesis::new(scorer.initial()?)];
    let mut finished: Vec<Hypothesis<M::State>> = Vec::new();

    for _ in 0..cfg.max_len {
        // (score, parent, token, raw p, used p)
        let mut candidates: Vec<(f64, usize, usize, f64, f64)> = Vec::new();
        let mut states = Vec::with_capacity(live.len());
        for (pi, hyp) in live.iter().enumerate() {
            let prev = hyp.tokens.last().copied().unwrap_or(bos);
            let (dist, state) = scorer.step(&hyp.state, prev)?;
            states.push(state);
            for (w, &p) in dist.iter().enumerate() {
                let used = match cfg.mode {
                    SearchMode::Greedy | SearchMode::Beam => p,
                    SearchMode::Rbs => rbs_adjust(p, hyp.repeat_count(w, cfg.n), cfg.eta),
                    SearchMode::HardNorepeat => {
                        if hyp.repeat_count(w, cfg.n) > 0 {
                            0.0
                        } else {
                            p
                        }
                    }
                };
                if used > 0.0 {
                    candidates.push((hyp.score + used.ln(), pi, w, p, used));
                }
            }
        }
        candidates.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
        candidates.truncate(cfg.beam_size);

        let mut next = Vec::with_capacity(cfg.beam_size);
        for (_, pi, w, p, used) in candidates {
            let done = Some(w) == eos;
            let hyp = live[pi].extend(w, p, used, states[pi].clone(), cfg.n, done);
            if done {
                finished.push(hyp);
            } else {
                next.push(hyp);
            }
        }
        live = next;
        if live.is_empty() || finished.len() >= cfg.beam_size {
            break;
        }
    }

    let unfinished = finished.is_empty();
    let mut ranked = if unfinished {
        if live.is_empty() {
            return Err(Error::Internal("every candidate was pruned".into()));
        }
        if eos.is_some() {
            log::warn!("no hypothesis reached EOS within {} tokens", cfg.max_len);
        }
        live
    } else {
        finished
    };
    ranked.sort_by(|a, b| {
        b.ranking_score(cfg.length_norm)
            .total_cmp(&a.ranking_score(cfg.length_norm))
    });
    ranked.truncate(cfg.beam_size);
    Ok(SearchResult {
        hypotheses: ranked,
        unfinished,
    })
}

/// Beam search that forbids any repeated n-gram.
pub fn hard_norepeat_search<M: StepScorer>(
    scorer: &mut M,
    cfg: &SearchConfig,
) -> Result<SearchResult<M::State>> {
    beam_search(
        scorer,
        &SearchConfig {
            mode: SearchMode::HardNorepeat,
            ..*cfg
        },
    )
}

/// Scores steps of a trained model on one encoded article.
pub struct ModelScorer<'p> {
    graph: Graph<'p>,
    model: &'p Model,
    encoded: EncodedArticle,
    emotion: Option<Var>,
}

impl<'p> ModelScorer<'p> {
    pub fn new(model: &'p Model, article: &[Vec<usize>], emotion: EmotionCategory) -> Result<Self> {
        let mut graph = Graph::inference(&model.params);
        let encoded = encode_article(
            &mut graph,
            &model.config,
            article,
            None,
            None,
            &mut Dropout::off(),
        )?;
        let emotion = model.emotion_vector(&mut graph, emotion)?;
        Ok(Self {
            graph,
            model,
            encoded,
            emotion,
        })
    }
}

impl StepScorer for ModelScorer<'_> {
    type State = DecoderState;

    fn initial(&mut self) -> Result<DecoderState> {
        Ok(DecoderState::init(
            &mut self.graph,
            &self.model.config,
            &self.encoded,
        ))
    }

    fn step(&mut self, state: &DecoderState, prev: usize) -> Result<(Vec<f64>, DecoderState)> {
        let (out, next) = decode_step(
            &mut self.graph,
            &self.model.config,
            prev,
            state,
            &self.encoded,
            self.emotion,
            &mut Dropout::off(),
            Overrides::default(),
        )?;
        Ok((self.graph.value(out.final_dist).to_vec(), next))
    }
}

/// Decodes a comment for `article` and returns the best token sequence
/// without EOS, plus whether the search had to stop unfinished.
pub fn generate(
    model: &Model,
    article: &[Vec<usize>],
    emotion: EmotionCategory,
    cfg: &SearchConfig,
) -> Result<(Vec<usize>, bool)> {
    let mut scorer = ModelScorer::new(model, article, emotion)?;
    let result = search(&mut scorer, cfg)?;
    Ok((result.best().body(Some(EOS)).to_vec(), result.unfinished))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    /// Three tokens, next-token distribution depends only on the previous one.
    struct Toy {
        table: [[f64; 3]; 4],
    }

    impl StepScorer for Toy {
        type State = ();

        fn initial(&mut self) -> Result<()> {
            Ok(())
        }

        fn step(&mut self, _: &(), prev: usize) -> Result<(Vec<f64>, ())> {
            Ok((self.table[prev].to_vec(), ()))
        }

        fn bos(&self) -> usize {
            3
        }

        fn eos(&self) -> Option<usize> {
            None
        }
    }

    fn toy() -> Toy {
        Toy {
            table: [
                [0.13, 0.57, 0.30],
                [0.46, 0.21, 0.33],
                [0.41, 0.37, 0.22],
                [0.52, 0.29, 0.19],
            ],
        }
    }

    /// All 27 sequences with their log-probabilities, best first.
    fn enumerate(t: &Toy, allow: impl Fn(&[usize]) -> bool) -> Vec<(Vec<usize>, f64)> {
        let mut all = Vec::new();
        for a in 0..3 {
            for b in 0..3 {
                for c in 0..3 {
                    let seq = vec![a, b, c];
                    if !allow(&seq) {
                        continue;
                    }
                    let lp = t.table[3][a].ln() + t.table[a][b].ln() + t.table[b][c].ln();
                    all.push((seq, lp));
                }
            }
        }
        all.sort_by(|x, y| y.1.total_cmp(&x.1).then(x.0.cmp(&y.0)));
        all
    }

    fn cfg(beam: usize, mode: SearchMode) -> SearchConfig {
        SearchConfig {
            beam_size: beam,
            max_len: 3,
            n: 1,
            eta: 0.5,
            mode,
            length_norm: true,
        }
    }

    fn seqs<S>(r: &SearchResult<S>) -> Vec<Vec<usize>> {
        r.hypotheses.iter().map(|h| h.tokens.clone()).collect()
    }

    #[test]
    fn rbs_adjust_examples() {
        assert_eq!(rbs_adjust(0.3, 2, 0.5), 0.0);
        assert_eq!(rbs_adjust(0.3, 0, 0.5), 0.3);
        assert!((rbs_adjust(0.9, 1, 0.5) - 0.4).abs() < 1e-12);
    }

    #[test]
    fn beam_two_matches_enumeration() {
        let mut t = toy();
        let oracle = enumerate(&t, |_| true);
        let r = beam_search(&mut t, &cfg(2, SearchMode::Beam)).unwrap();
        assert!(r.unfinished);
        let want: Vec<_> = oracle[..2].iter().map(|(s, _)| s.clone()).collect();
        assert_eq!(seqs(&r), want);
        for (h, (_, lp)) in r.hypotheses.iter().zip(&oracle) {
            assert!((h.log_prob - lp).abs() < 1e-12);
        }
    }

    #[test]
    fn wide_beam_gives_full_ranking() {
        let mut t = toy();
        let oracle = enumerate(&t, |_| true);
        for beam in [9, 27] {
            let r = beam_search(&mut t, &cfg(beam, SearchMode::Beam)).unwrap();
            let want: Vec<_> = oracle[..beam].iter().map(|(s, _)| s.clone()).collect();
            assert_eq!(seqs(&r), want);
        }
    }

    #[test]
    fn hard_norepeat_gives_permutations() {
        let mut t = toy();
        let oracle = enumerate(&t, |s| s[0] != s[1] && s[1] != s[2] && s[0] != s[2]);
        assert_eq!(oracle.len(), 6);
        let r = hard_norepeat_search(&mut t, &cfg(27, SearchMode::Beam)).unwrap();
        let want: Vec<_> = oracle.iter().map(|(s, _)| s.clone()).collect();
        assert_eq!(seqs(&r), want);
    }

    #[test]
    fn rbs_with_unit_penalty_never_repeats() {
        let mut t = toy();
        let mut c = cfg(27, SearchMode::Rbs);
        c.eta = 1.0;
        let rbs = beam_search(&mut t, &c).unwrap();
        let hard = hard_norepeat_search(&mut t, &c).unwrap();
        assert_eq!(seqs(&rbs), seqs(&hard));
    }

    #[test]
    fn rbs_ranks_by_adjusted_probability() {
        let mut t = toy();
        let r = beam_search(&mut t, &cfg(27, SearchMode::Rbs)).unwrap();
        // [1, 0, 0]: 0.29 * 0.46 * max(0.13 - 0.5, 0) is pruned
        assert!(!seqs(&r).contains(&vec![1, 0, 0]));
        let h = r.hypotheses.iter().find(|h| h.tokens == [1, 0, 1]).unwrap();
        let used = 0.29f64.ln() + 0.46f64.ln() + (0.57f64 - 0.5).ln();
        assert!((h.score - used).abs() < 1e-12);
        let raw = 0.29f64.ln() + 0.46f64.ln() + 0.57f64.ln();
        assert!((h.log_prob - raw).abs() < 1e-12);
    }

    #[test]
    fn zero_penalty_is_plain_beam() {
        let mut t = toy();
        let mut c = cfg(4, SearchMode::Rbs);
        c.eta = 0.0;
        let rbs = beam_search(&mut t, &c).unwrap();
        let beam = beam_search(&mut t, &cfg(4, SearchMode::Beam)).unwrap();
        assert_eq!(seqs(&rbs), seqs(&beam));
    }

    /// Random Markov model with EOS at id 0 over `v` tokens.
    struct Markov {
        rows: Vec<Vec<f64>>,
    }

    impl Markov {
        fn new(v: usize, seed: u64) -> Self {
            let mut rng = crate::tensor::Rng::new(seed);
            let rows = (0..=v)
                .map(|_| {
                    let raw: Vec<f64> = (0..v).map(|_| rng.next_f64() + 0.05).collect();
                    let z: f64 = raw.iter().sum();
                    raw.iter().map(|x| x / z).collect()
                })
                .collect();
            Self { rows }
        }
    }

    impl StepScorer for Markov {
        type State = usize;

        fn initial(&mut self) -> Result<usize> {
            Ok(0)
        }

        fn step(&mut self, steps: &usize, prev: usize) -> Result<(Vec<f64>, usize)> {
            Ok((self.rows[prev].clone(), steps + 1))
        }

        fn bos(&self) -> usize {
            self.rows.len() - 1
        }

        fn eos(&self) -> Option<usize> {
            Some(0)
        }
    }

    #[test]
    fn unfinished_flag_and_body() {
        let mut m = Markov::new(5, 1);
        let r = beam_search(
            &mut m,
            &SearchConfig {
                max_len: 1,
                mode: SearchMode::Beam,
                ..SearchConfig::default()
            },
        )
        .unwrap();
        assert!(!r.hypotheses.is_empty());
        let r = beam_search(
            &mut m,
            &SearchConfig {
                max_len: 40,
                mode: SearchMode::Beam,
                ..SearchConfig::default()
            },
        )
        .unwrap();
        assert!(!r.unfinished);
        let best = r.best();
        assert_eq!(best.tokens.last(), Some(&0));
        assert_eq!(best.body(Some(0)).len(), best.tokens.len() - 1);
    }

    #[test]
    fn config_validation() {
        assert!(cfg(0, SearchMode::Beam).validate().is_err());
        let mut c = cfg(2, SearchMode::Rbs);
        c.eta = -1.0;
        assert!(c.validate().is_err());
        c.eta = 0.5;
        c.n = 0;
        assert!(c.validate().is_err());
        assert_eq!(
            "hard".parse::<SearchMode>().unwrap(),
            SearchMode::HardNorepeat
        );
        assert!("sample".parse::<SearchMode>().is_err());
    }

    proptest! {
        #[test]
        fn adjust_never_raises(p in 0.0f64..=1.0, count in 0usize..5, eta in 0.0f64..2.0) {
            let q = rbs_adjust(p, count, eta);
            prop_assert!(q <= p);
            prop_assert_eq!(q == p, count == 0 || eta == 0.0 || p == 0.0);
        }

        #[test]
        fn ngram_counts_match_recount(tokens in prop::collection::vec(0usize..4, 0..20), n in 1usize..4) {
            let mut h = Hypothesis::new(());
            for &t in &tokens {
                h = h.extend(t, 0.5, 0.5, (), n, false);
                prop_assert_eq!(&h.ngram_counts, &count_ngrams(&h.tokens, n));
            }
        }

        #[test]
        fn beam_one_is_greedy(seed in 0u64..200, v in 2usize..7) {
            let mut m = Markov::new(v, seed);
            let c = SearchConfig { beam_size: 1, max_len: 12, mode: SearchMode::Beam, ..SearchConfig::default() };
            let b = beam_search(&mut m, &c).unwrap();
            let g = greedy(&mut m, 12).unwrap();
            prop_assert_eq!(&b.best().tokens, &g.best().tokens);
        }

        #[test]
        fn ranking_is_sorted_and_deterministic(seed in 0u64..200, mode in 1usize..4) {
            let mode = [SearchMode::Greedy, SearchMode::Beam, SearchMode::Rbs, SearchMode::HardNorepeat][mode];
            let mut m = Markov::new(5, seed);
            let c = SearchConfig { max_len: 8, mode, ..SearchConfig::default() };
            let a = beam_search(&mut m, &c).unwrap();
            let b = beam_search(&mut m, &c).unwrap();
            prop_assert_eq!(seqs(&a), seqs(&b));
            for w in a.hypotheses.windows(2) {
                prop_assert!(w[0].ranking_score(true) >= w[1].ranking_score(true));
            }
        }

        #[test]
        fn hard_mode_never_repeats(seed in 0u64..200, n in 1usize..3) {
            let mut m = Markov::new(6, seed);
            let c = SearchConfig { max_len: 10, n, mode: SearchMode::HardNorepeat, ..SearchConfig::default() };
            let r = beam_search(&mut m, &c).unwrap();
            for h in &r.hypotheses {
                prop_assert!(count_ngrams(&h.tokens, n).values().all(|&c| c == 1));
            }
        }
    }
}
