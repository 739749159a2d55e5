//! Hierarchical article encoder: a word-level LSTM over each sentence and a
//! sentence-level LSTM over the resulting sentence embeddings.

use crate::corpus::{MAX_SENTENCES, MAX_SENTENCE_TOKENS};
use crate::error::{Error, Result};
use crate::model::{lstm_stack_step, names, Dropout, ModelConfig, SENT_STACK, WORD_STACK};
use crate::tensor::{Graph, Var};

/// Encoder outputs for one article. Only unmasked sentences and tokens are
/// kept, so every vector here corresponds to a real token or sentence.
#[derive(Clone, Debug)]
pub struct EncodedArticle {
    /// Word-level hidden states `h_i^j`, per sentence.
    pub word_states: Vec<Vec<Var>>,
    /// Token ids aligned with `word_states`.
    pub word_tokens: Vec<Vec<usize>>,
    /// `[T_i x d_h]` stack of each sentence's word states.
    pub word_matrices: Vec<Var>,
    /// `[sum T_i x d_h]` stack of all word states, sentence-major.
    pub all_words: Var,
    /// Sentence embeddings: the last word state of each sentence.
    pub sentence_embeddings: Vec<Var>,
    /// Sentence-level hidden states `g_i`.
    pub sentence_states: Vec<Var>,
    /// `[N x d_h]` stack of `sentence_states`.
    pub sentence_matrix: Var,
    /// Last sentence-level state; initializes the decoder.
    pub article_state: Var,
}

impl EncodedArticle {
    pub fn n_sentences(&self) -> usize {
        self.sentence_states.len()
    }

    /// Token ids of every word, in the order of `all_words`.
    pub fn flat_tokens(&self) -> Vec<usize> {
        self.word_tokens.iter().flatten().copied().collect()
    }
}

fn zero_state(g: &mut Graph, layers: usize, d_h: usize) -> Vec<(Var, Var)> {
    (0..layers).map(|_| (g.zeros(d_h), g.zeros(d_h))).collect()
}

/// Runs the word-level LSTM over one sentence from a zero state.
///
/// Positions where `mask` is false are skipped. Returns the hidden state of
/// every kept token and the sentence embedding (last kept state).
pub fn encode_sentence(
    g: &mut Graph,
    cfg: &ModelConfig,
    tokens: &[usize],
    mask: Option<&[bool]>,
    drop: &mut Dropout,
) -> Result<(Vec<Var>, Var)> {
    let kept = kept_tokens(tokens, mask)?;
    if kept.is_empty() {
        return Err(Error::Data("cannot encode an empty sentence".into()));
    }
    if kept.len() > MAX_SENTENCE_TOKENS {
        return Err(Error::Data(format!(
            "sentence has {} tokens, limit is {MAX_SENTENCE_TOKENS}",
            kept.len()
        )));
    }
    let table = g.param_named(names::EMBEDDING)?;
    let mut state = zero_state(g, cfg.word_layers, cfg.d_h);
    let mut outputs = Vec::with_capacity(kept.len());
    for &tok in &kept {
        let e = g.embedding_row(table, tok)?;
        let e = drop.apply(g, e)?;
        outputs.push(lstm_stack_step(g, WORD_STACK, e, &mut state, drop)?);
    }
    let last = *outputs.last().expect("non-empty sentence");
    Ok((outputs, last))
}

fn kept_tokens(tokens: &[usize], mask: Option<&[bool]>) -> Result<Vec<usize>> {
    match mask {
        None => Ok(tokens.to_vec()),
        Some(m) if m.len() == tokens.len() => Ok(tokens
            .iter()
            .zip(m)
            .filter(|(_, &keep)| keep)
            .map(|(&t, _)| t)
            .collect()),
        Some(m) => Err(Error::Internal(format!(
            "token mask of length {} for {} tokens",
            m.len(),
            tokens.len()
        ))),
    }
}

/// Encodes an article given as (possibly padded) sentences.
///
/// `token_mask` and `sentence_mask`, when given, must match the padded
/// layout; masked sentences and tokens are ignored.
pub fn encode_article(
    g: &mut Graph,
    cfg: &ModelConfig,
    sentences: &[Vec<usize>],
    token_mask: Option<&[Vec<bool>]>,
    sentence_mask: Option<&[bool]>,
    drop: &mut Dropout,
) -> Result<EncodedArticle> {
    if let Some(m) = sentence_mask {
        if m.len() != sentences.len() {
            return Err(Error::Internal(
                "sentence mask length differs from article".into(),
            ));
        }
    }
    if let Some(m) = token_mask {
        if m.len() != sentences.len() {
            return Err(Error::Internal(
                "token mask count differs from article".into(),
            ));
        }
    }
    let mut word_states = Vec::new();
    let mut word_tokens = Vec::new();
    let mut sentence_embeddings = Vec::new();
    for (i, sentence) in sentences.iter().enumerate() {
        if sentence_mask.is_some_and(|m| !m[i]) {
            continue;
        }
        let mask = token_mask.map(|m| m[i].as_slice());
        let (states, emb) = encode_sentence(g, cfg, sentence, mask, drop)?;
        word_tokens.push(kept_tokens(sentence, mask)?);
        word_states.push(states);
        sentence_embeddings.push(emb);
    }
    if sentence_embeddings.is_empty() {
        return Err(Error::Data("cannot encode an empty article".into()));
    }
    if sentence_embeddings.len() > MAX_SENTENCES {
        return Err(Error::Data(format!(
            "article has {} sentences, limit is {MAX_SENTENCES}",
            sentence_embeddings.len()
        )));
    }

    let mut state = zero_state(g, cfg.sent_layers, cfg.d_h);
    let mut sentence_states = Vec::with_capacity(sentence_embeddings.len());
    for &e in &sentence_embeddings {
        sentence_states.push(lstm_stack_step(g, SENT_STACK, e, &mut state, drop)?);
    }
    let word_matrices = word_states
        .iter()
        .map(|s| g.stack(s))
        .collect::<Result<Vec<_>>>()?;
    let flat: Vec<Var> = word_states.iter().flatten().copied().collect();
    let all_words = g.stack(&flat)?;
    let sentence_matrix = g.stack(&sentence_states)?;
    let article_state = *sentence_states.last().expect("non-empty article");
    Ok(EncodedArticle {
        word_states,
        word_tokens,
        word_matrices,
        all_words,
        sentence_embeddings,
        sentence_states,
        sentence_matrix,
        article_state,
    })
}
