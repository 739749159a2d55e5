//! One decoder step: emotion fusion, the decoder LSTM, and either sentence
//! attention or the hierarchical copy distribution.

use crate::encoder::EncodedArticle;
use crate::error::{Error, Result};
use crate::model::{lstm_stack_step, names, CopyMode, Dropout, Fusion, ModelConfig, DEC_STACK};
use crate::tensor::{Graph, Var};

/// Decoder LSTM state: `(h, c)` per layer plus the number of steps taken.
#[derive(Clone, Debug)]
pub struct DecoderState {
    pub layers: Vec<(Var, Var)>,
    pub step: usize,
}

impl DecoderState {
    /// Every layer starts from the article state with a zero cell.
    pub fn init(g: &mut Graph, cfg: &ModelConfig, encoded: &EncodedArticle) -> Self {
        let layers = (0..cfg.dec_layers)
            .map(|_| (encoded.article_state, g.zeros(cfg.d_h)))
            .collect();
        Self { layers, step: 0 }
    }

    /// Top-layer hidden state.
    pub fn top(&self) -> Var {
        self.layers
            .last()
            .expect("decoder has at least one layer")
            .0
    }
}

/// Forces parts of the step to fixed values. Used to check limiting cases.
#[derive(Clone, Copy, Debug, Default)]
pub struct Overrides {
    /// Value written into both fusion gates.
    pub gate: Option<f64>,
    /// Value used instead of the generation probability.
    pub p_gen: Option<f64>,
}

#[derive(Clone, Debug)]
pub struct StepOutput {
    /// Distribution over the vocabulary.
    pub final_dist: Var,
    /// Vocabulary distribution before copy mixing.
    pub vocab_dist: Var,
    /// Generation probability; `None` without copying.
    pub p_gen: Option<Var>,
    /// Word-level copy attention over all article tokens, sentence-major.
    pub gamma: Option<Var>,
    /// Sentence attention weights.
    pub beta: Var,
    /// Attention vector fed to the output projection.
    pub attn_vector: Var,
}

pub fn fuse_simple(g: &mut Graph, emotion: Var, prev: Var) -> Result<Var> {
    g.add(emotion, prev)
}

/// Gated fusion: `v * z_e + e * z_w`, both gates read `[v; s_prev]`.
pub fn fuse_dynamic(
    g: &mut Graph,
    emotion: Var,
    prev: Var,
    s_prev: Var,
    gate_override: Option<f64>,
) -> Result<Var> {
    let (z_e, z_w) = match gate_override {
        Some(v) => {
            let n = g.numel(emotion);
            (g.vector(vec![v; n]), g.vector(vec![v; n]))
        }
        None => {
            let x = g.concat(&[emotion, s_prev], 0)?;
            let gate = |g: &mut Graph, w: &str, b: &str| -> Result<Var> {
                let w = g.param_named(w)?;
                let b = g.param_named(b)?;
                let z = g.matmul(w, x)?;
                let z = g.add(z, b)?;
                Ok(g.sigmoid(z))
            };
            let z_e = gate(g, names::FUSE_W_E, names::FUSE_B_E)?;
            let z_w = gate(g, names::FUSE_W_W, names::FUSE_B_W)?;
            (z_e, z_w)
        }
    };
    let a = g.mul(emotion, z_e)?;
    let b = g.mul(prev, z_w)?;
    g.add(a, b)
}

fn attention_vector(g: &mut Graph, w: &str, b: &str, context: Var, s: Var) -> Result<Var> {
    let w = g.param_named(w)?;
    let b = g.param_named(b)?;
    let x = g.concat(&[context, s], 0)?;
    let z = g.matmul(w, x)?;
    let z = g.add(z, b)?;
    Ok(g.tanh(z))
}

/// Bilinear attention `softmax(M (s^T W))` over the rows of `memory`.
fn bilinear_weights(g: &mut Graph, w: Var, s: Var, memory: Var) -> Result<Var> {
    let q = g.matmul(s, w)?;
    let scores = g.matmul(memory, q)?;
    g.softmax(scores, 0)
}

/// Sentence-level attention. Returns the attention vector and the weights.
pub fn attend_sentences(g: &mut Graph, s: Var, sentence_matrix: Var) -> Result<(Var, Var)> {
    if g.shape(sentence_matrix).first() == Some(&0) {
        return Err(Error::Data("attention over zero sentences".into()));
    }
    let w_g = g.param_named(names::ATTN_W_G)?;
    let m = bilinear_weights(g, w_g, s, sentence_matrix)?;
    let context = g.matmul(m, sentence_matrix)?;
    let a = attention_vector(g, names::ATTN_W_A, names::ATTN_B_A, context, s)?;
    Ok((a, m))
}

/// Hierarchical copy distribution mixed with the vocabulary distribution.
pub fn copy_distribution(
    g: &mut Graph,
    cfg: &ModelConfig,
    s: Var,
    encoded: &EncodedArticle,
    prev_emb: Var,
    drop: &mut Dropout,
    p_gen_override: Option<f64>,
) -> Result<StepOutput> {
    if encoded.word_matrices.len() != encoded.n_sentences()
        || encoded.word_tokens.len() != encoded.n_sentences()
    {
        return Err(Error::Internal(
            "encoded article has inconsistent sentence counts".into(),
        ));
    }
    let w_x = g.param_named(names::COPY_W_X)?;
    let beta = bilinear_weights(g, w_x, s, encoded.sentence_matrix)?;
    let w_y = g.param_named(names::COPY_W_Y)?;
    let q = g.matmul(s, w_y)?;
    let mut parts = Vec::with_capacity(encoded.n_sentences());
    for (i, &words) in encoded.word_matrices.iter().enumerate() {
        let scores = g.matmul(words, q)?;
        let alpha = g.softmax(scores, 0)?;
        let b_i = g.pick(beta, i)?;
        parts.push(g.mul_scalar(alpha, b_i)?);
    }
    let gamma = g.concat(&parts, 0)?;
    let context = g.matmul(gamma, encoded.all_words)?;
    let a = attention_vector(g, names::COPY_W_A, names::COPY_B_A, context, s)?;

    let a_out = drop.apply(g, a)?;
    let w_p = g.param_named(names::OUT_W_P)?;
    let logits = g.matmul(w_p, a_out)?;
    let vocab_dist = g.softmax(logits, 0)?;

    let p_gen = match p_gen_override {
        Some(v) => g.scalar(v),
        None => {
            let mut terms = Vec::with_capacity(4);
            for (w, x) in [
                (names::COPY_W_PA, a),
                (names::COPY_W_PS, s),
                (names::COPY_W_PE, prev_emb),
            ] {
                let w = g.param_named(w)?;
                terms.push(g.matmul(w, x)?);
            }
            let b = g.param_named(names::COPY_B_PTR)?;
            terms.push(g.pick(b, 0)?);
            let z = g.add_all(&terms)?;
            g.sigmoid(z)
        }
    };
    let tokens = encoded.flat_tokens();
    let copied = g.scatter_add(gamma, &tokens, cfg.vocab_size)?;
    let generated = g.mul_scalar(vocab_dist, p_gen)?;
    let p_copy = g.one_minus(p_gen);
    let copied = g.mul_scalar(copied, p_copy)?;
    let final_dist = g.add(generated, copied)?;
    Ok(StepOutput {
        final_dist,
        vocab_dist,
        p_gen: Some(p_gen),
        gamma: Some(gamma),
        beta,
        attn_vector: a,
    })
}

/// Runs one decoder step from `prev_token`. `emotion` must be given exactly
/// when the configuration fuses an emotion embedding.
#[allow(clippy::too_many_arguments)]
pub fn decode_step(
    g: &mut Graph,
    cfg: &ModelConfig,
    prev_token: usize,
    state: &DecoderState,
    encoded: &EncodedArticle,
    emotion: Option<Var>,
    drop: &mut Dropout,
    overrides: Overrides,
) -> Result<(StepOutput, DecoderState)> {
    let table = g.param_named(names::EMBEDDING)?;
    let prev_emb = g.embedding_row(table, prev_token)?;
    let input = match (cfg.fusion, emotion) {
        (Fusion::None, None) => prev_emb,
        (Fusion::Simple, Some(v)) => fuse_simple(g, v, prev_emb)?,
        (Fusion::Dynamic, Some(v)) => fuse_dynamic(g, v, prev_emb, state.top(), overrides.gate)?,
        (Fusion::None, Some(_)) => {
            return Err(Error::Config(
                "emotion given to a decoder without fusion".into(),
            ))
        }
        (_, None) => {
            return Err(Error::Config(format!(
                "{} fusion needs an emotion embedding",
                cfg.fusion
            )))
        }
    };
    let input = drop.apply(g, input)?;
    let mut layers = state.layers.clone();
    let s = lstm_stack_step(g, DEC_STACK, input, &mut layers, drop)?;
    let next = DecoderState {
        layers,
        step: state.step + 1,
    };

    let out = match cfg.copy {
        CopyMode::Hierarchical => {
            copy_distribution(g, cfg, s, encoded, prev_emb, drop, overrides.p_gen)?
        }
        CopyMode::Off => {
            let (a, m) = attend_sentences(g, s, encoded.sentence_matrix)?;
            let a_out = drop.apply(g, a)?;
            let w_p = g.param_named(names::OUT_W_P)?;
            let logits = g.matmul(w_p, a_out)?;
            let dist = g.softmax(logits, 0)?;
            StepOutput {
                final_dist: dist,
                vocab_dist: dist,
                p_gen: None,
                gamma: None,
                beta: m,
                attn_vector: a,
            }
        }
    };
    Ok((out, next))
}
