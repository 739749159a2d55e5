//! Training objectives: teacher-forced likelihood and the emotion loss on
//! soft step embeddings.

use serde::{Deserialize, Serialize};

use crate::corpus::{EmotionCategory, Example};
use crate::decoder::{decode_step, DecoderState, Overrides};
use crate::encoder::encode_article;
use crate::error::{Error, Result};
use crate::model::{names, Dropout, ModelConfig};
use crate::tensor::{Graph, Var};

/// Probability floor applied before taking logs.
pub const PROB_FLOOR: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub mle: f64,
    pub emo: f64,
    pub total: f64,
    pub tokens: usize,
}

/// Mean negative log-likelihood of `targets` over unmasked positions.
pub fn mle_loss(
    g: &mut Graph,
    step_dists: &[Var],
    targets: &[usize],
    mask: Option<&[bool]>,
) -> Result<Var> {
    if step_dists.len() != targets.len() || mask.is_some_and(|m| m.len() != targets.len()) {
        return Err(Error::Internal(format!(
            "{} distributions for {} targets",
            step_dists.len(),
            targets.len()
        )));
    }
    let mut terms = Vec::with_capacity(targets.len());
    for (t, (&dist, &target)) in step_dists.iter().zip(targets).enumerate() {
        if mask.is_some_and(|m| !m[t]) {
            continue;
        }
        let logp = g.log_clamped(dist, PROB_FLOOR);
        terms.push(g.cross_entropy(logp, target)?);
    }
    if terms.is_empty() {
        return Err(Error::Data("likelihood over zero target positions".into()));
    }
    let n = terms.len();
    let total = g.add_all(&terms)?;
    Ok(g.scale(total, 1.0 / n as f64))
}

/// Indices of the `k` largest values, highest first, ties to the lower index.
pub fn top_k(values: &[f64], k: usize) -> Result<Vec<usize>> {
    if k == 0 || k > values.len() {
        return Err(Error::Config(format!(
            "top-k size {k} outside 1..={}",
            values.len()
        )));
    }
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&a, &b| values[b].total_cmp(&values[a]).then(a.cmp(&b)));
    idx.truncate(k);
    Ok(idx)
}

/// Probability-weighted sum of the embeddings of the `k` most likely tokens.
/// `selection` fixes the chosen tokens instead of recomputing them.
pub fn step_embedding(
    g: &mut Graph,
    dist: Var,
    table: Var,
    k: usize,
    selection: Option<&[usize]>,
) -> Result<Var> {
    let chosen = match selection {
        Some(s) => s.to_vec(),
        None => top_k(g.value(dist), k)?,
    };
    let weights = g.gather(dist, &chosen)?;
    let rows = g.embedding_lookup(table, &chosen)?;
    g.matmul(weights, rows)
}

/// Cross-entropy of the emotion classifier on the mean step embedding.
pub fn emotion_loss(
    g: &mut Graph,
    step_dists: &[Var],
    table: Var,
    head: Var,
    gold: usize,
    k: usize,
    selections: Option<&[Vec<usize>]>,
) -> Result<Var> {
    if step_dists.is_empty() {
        return Err(Error::Data("emotion loss over zero decoding steps".into()));
    }
    let n_labels = *g.shape(head).last().unwrap_or(&0);
    if gold >= n_labels {
        return Err(Error::Data(format!(
            "gold emotion {gold} outside {n_labels} labels"
        )));
    }
    let mut embs = Vec::with_capacity(step_dists.len());
    for (t, &dist) in step_dists.iter().enumerate() {
        let sel = selections.map(|s| s[t].as_slice());
        embs.push(step_embedding(g, dist, table, k, sel)?);
    }
    let sum = g.add_all(&embs)?;
    let mean = g.scale(sum, 1.0 / embs.len() as f64);
    let logits = g.matmul(mean, head)?;
    let logp = g.log_softmax(logits, 0)?;
    g.cross_entropy(logp, gold)
}

/// `mle + weight * emo`, as a graph node and as plain numbers.
pub fn total_loss(
    g: &mut Graph,
    mle: Var,
    emo: Var,
    weight: f64,
    tokens: usize,
) -> Result<(Var, LossReport)> {
    let weighted = g.scale(emo, weight);
    let total = g.add(mle, weighted)?;
    let report = LossReport {
        mle: g.scalar_value(mle)?,
        emo: g.scalar_value(emo)?,
        total: g.scalar_value(total)?,
        tokens,
    };
    Ok((total, report))
}

/// Loss settings shared by training and evaluation.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    pub emo_weight: f64,
    pub top_k: usize,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            emo_weight: 0.01,
            top_k: 50,
        }
    }
}

/// Encodes the article and decodes the reference with teacher forcing.
/// Returns the total loss node and its report.
pub fn example_loss(
    g: &mut Graph,
    cfg: &ModelConfig,
    example: &Example,
    loss: LossConfig,
    drop: &mut Dropout,
) -> Result<(Var, LossReport)> {
    let input = TeacherForced {
        article: &example.article,
        token_mask: None,
        sentence_mask: None,
        comment: &example.comment,
        comment_mask: None,
        emotion: example.emotion,
    };
    teacher_forced_loss(g, cfg, &input, loss, drop)
}

/// One training pair, optionally padded. Masks are `true` on real entries.
#[derive(Clone, Copy, Debug)]
pub struct TeacherForced<'a> {
    pub article: &'a [Vec<usize>],
    pub token_mask: Option<&'a [Vec<bool>]>,
    pub sentence_mask: Option<&'a [bool]>,
    /// `BOS, tokens.., EOS`, possibly followed by padding.
    pub comment: &'a [usize],
    pub comment_mask: Option<&'a [bool]>,
    pub emotion: EmotionCategory,
}

pub fn teacher_forced_loss(
    g: &mut Graph,
    cfg: &ModelConfig,
    input: &TeacherForced,
    loss: LossConfig,
    drop: &mut Dropout,
) -> Result<(Var, LossReport)> {
    let len = match input.comment_mask {
        Some(m) => m.iter().take_while(|&&b| b).count(),
        None => input.comment.len(),
    };
    if len < 2 {
        return Err(Error::Data("comment has no target tokens".into()));
    }
    let comment = &input.comment[..len];
    let encoded = encode_article(
        g,
        cfg,
        input.article,
        input.token_mask,
        input.sentence_mask,
        drop,
    )?;
    let emotion = cfg.emotion_vector(g, input.emotion)?;
    let mut state = DecoderState::init(g, cfg, &encoded);
    let mut dists = Vec::with_capacity(len - 1);
    for &prev in &comment[..len - 1] {
        let (out, next) = decode_step(
            g,
            cfg,
            prev,
            &state,
            &encoded,
            emotion,
            drop,
            Overrides::default(),
        )?;
        dists.push(out.final_dist);
        state = next;
    }
    let targets = &comment[1..];
    let mle = mle_loss(g, &dists, targets, None)?;
    let table = g.param_named(names::EMBEDDING)?;
    let head = g.param_named(names::EMO_HEAD)?;
    let k = loss.top_k.min(cfg.vocab_size);
    let emo = emotion_loss(g, &dists, table, head, input.emotion.label(), k, None)?;
    total_loss(g, mle, emo, loss.emo_weight, targets.len())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{grad_check, ParamStore, Rng, Tensor};
    use proptest::prelude::*;

    fn store(v: usize, e: usize, l: usize, head_zero: bool) -> ParamStore {
        let mut rng = Rng::new(3);
        let mut p = ParamStore::new();
        p.add(
            "embedding",
            Tensor::uniform(vec![v, e], -0.5, 0.5, &mut rng),
        )
        .unwrap();
        let head = if head_zero {
            Tensor::zeros(vec![e, l])
        } else {
            Tensor::uniform(vec![e, l], -0.5, 0.5, &mut rng)
        };
        p.add("head", head).unwrap();
        p.add("logits", Tensor::uniform(vec![3 * v], -2.0, 2.0, &mut rng))
            .unwrap();
        p
    }

    #[test]
    fn mle_cases() {
        let p = ParamStore::new();
        let mut g = Graph::new(&p);
        let one_hot = g.vector(vec![0.0, 1.0, 0.0]);
        let loss = mle_loss(&mut g, &[one_hot, one_hot], &[1, 1], None).unwrap();
        assert!(g.scalar_value(loss).unwrap().abs() < 1e-12);

        let uniform = g.vector(vec![0.01; 100]);
        let loss = mle_loss(&mut g, &[uniform], &[42], None).unwrap();
        assert!((g.scalar_value(loss).unwrap() - 100f64.ln()).abs() < 1e-9);

        let bad = g.vector(vec![1.0, 0.0, 0.0]);
        let masked = mle_loss(&mut g, &[one_hot, bad], &[1, 1], Some(&[true, false])).unwrap();
        assert!(g.scalar_value(masked).unwrap().abs() < 1e-12);
        let unmasked = mle_loss(&mut g, &[one_hot, bad], &[1, 1], None).unwrap();
        assert!((g.scalar_value(unmasked).unwrap() - 0.5 * -PROB_FLOOR.ln()).abs() < 1e-9);

        let r = mle_loss(&mut g, &[one_hot], &[1], Some(&[false]));
        assert!(matches!(r, Err(Error::Data(_))));
    }

    #[test]
    fn step_embedding_cases() {
        let mut p = ParamStore::new();
        p.add(
            "t",
            Tensor::new(vec![3, 2], vec![1.0, 2.0, 10.0, 20.0, 100.0, 200.0]).unwrap(),
        )
        .unwrap();
        let mut g = Graph::new(&p);
        let table = g.param_named("t").unwrap();

        let dist = g.vector(vec![0.5, 0.3, 0.2]);
        let e = step_embedding(&mut g, dist, table, 2, None).unwrap();
        let want = [0.5 + 3.0, 1.0 + 6.0];
        for (a, b) in g.value(e).iter().zip(want) {
            assert!((a - b).abs() < 1e-9);
        }

        let e = step_embedding(&mut g, dist, table, 3, None).unwrap();
        let full = [0.5 + 3.0 + 20.0, 1.0 + 6.0 + 40.0];
        for (a, b) in g.value(e).iter().zip(full) {
            assert!((a - b).abs() < 1e-9);
        }

        let hot = g.vector(vec![0.0, 0.0, 1.0]);
        for k in 1..=3 {
            let e = step_embedding(&mut g, hot, table, k, None).unwrap();
            assert_eq!(g.value(e), &[100.0, 200.0]);
        }
        for k in [0, 4] {
            assert!(matches!(
                step_embedding(&mut g, dist, table, k, None),
                Err(Error::Config(_))
            ));
        }
    }

    #[test]
    fn top_k_breaks_ties_low() {
        assert_eq!(top_k(&[0.2, 0.4, 0.2, 0.2], 3).unwrap(), vec![1, 0, 2]);
    }

    fn dists(g: &mut Graph) -> Vec<Var> {
        let logits = g.param_named("logits").unwrap();
        let v = g.numel(logits) / 3;
        (0..3)
            .map(|t| {
                let row = g.slice(logits, t * v, v).unwrap();
                g.softmax(row, 0).unwrap()
            })
            .collect()
    }

    #[test]
    fn zero_head_gives_uniform_classifier() {
        let p = store(6, 4, 5, true);
        let mut g = Graph::new(&p);
        let d = dists(&mut g);
        let (t, h) = (
            g.param_named("embedding").unwrap(),
            g.param_named("head").unwrap(),
        );
        let loss = emotion_loss(&mut g, &d, t, h, 2, 3, None).unwrap();
        assert!((g.scalar_value(loss).unwrap() - 5f64.ln()).abs() < 1e-12);
        assert!(matches!(
            emotion_loss(&mut g, &d, t, h, 5, 3, None),
            Err(Error::Data(_))
        ));
    }

    #[test]
    fn emotion_loss_is_cross_entropy_and_label_covariant() {
        let p = store(6, 4, 3, false);
        let mut g = Graph::new(&p);
        let d = dists(&mut g);
        let (t, h) = (
            g.param_named("embedding").unwrap(),
            g.param_named("head").unwrap(),
        );
        let losses: Vec<f64> = (0..3)
            .map(|gold| {
                let l = emotion_loss(&mut g, &d, t, h, gold, 4, None).unwrap();
                g.scalar_value(l).unwrap()
            })
            .collect();

        // direct recomputation
        let mut mean = [0.0; 4];
        for &dv in &d {
            let probs = g.value(dv).to_vec();
            for w in top_k(&probs, 4).unwrap() {
                let row = &p.tensor(p.id("embedding").unwrap()).data()[w * 4..w * 4 + 4];
                for (m, &e) in mean.iter_mut().zip(row) {
                    *m += probs[w] * e as f64 / 3.0;
                }
            }
        }
        let head = p.tensor(p.id("head").unwrap()).data();
        let logits: Vec<f64> = (0..3)
            .map(|c| (0..4).map(|j| mean[j] * head[j * 3 + c] as f64).sum())
            .collect();
        let z: f64 = logits.iter().map(|x| x.exp()).sum();
        for gold in 0..3 {
            let ce = -(logits[gold].exp() / z).ln();
            assert!((ce - losses[gold]).abs() < 1e-9);
            assert!(losses[gold] >= 0.0);
        }

        // swap labels 0 and 2 in the head
        let mut permuted = p.clone();
        let hid = permuted.id("head").unwrap();
        let data = permuted.tensor_mut(hid).data_mut();
        for j in 0..4 {
            data.swap(j * 3, j * 3 + 2);
        }
        let mut g = Graph::new(&permuted);
        let d = dists(&mut g);
        let (t, h) = (
            g.param_named("embedding").unwrap(),
            g.param_named("head").unwrap(),
        );
        let l = emotion_loss(&mut g, &d, t, h, 2, 4, None).unwrap();
        assert!((g.scalar_value(l).unwrap() - losses[0]).abs() < 1e-12);
    }

    #[test]
    fn emotion_loss_gradient_with_frozen_selection() {
        let mut p = store(12, 8, 5, false);
        let selections: Vec<Vec<usize>> = {
            let mut g = Graph::inference(&p);
            let d = dists(&mut g);
            d.iter().map(|&v| top_k(g.value(v), 4).unwrap()).collect()
        };
        let report = grad_check(&mut p, None, |g| {
            let d = dists(g);
            let t = g.param_named("embedding")?;
            let h = g.param_named("head")?;
            emotion_loss(g, &d, t, h, 1, 4, Some(&selections))
        })
        .unwrap();
        assert!(report.max_rel_error() < 1e-3, "{:?}", report.worst());
    }

    #[test]
    fn total_loss_cases() {
        let p = ParamStore::new();
        let mut g = Graph::new(&p);
        let (mle, emo) = (g.scalar(2.0), g.scalar(3.0));
        let (_, r) = total_loss(&mut g, mle, emo, 0.01, 7).unwrap();
        assert!((r.total - 2.03).abs() < 1e-12);
        assert_eq!(r.tokens, 7);
        let (_, r) = total_loss(&mut g, mle, emo, 0.0, 7).unwrap();
        assert_eq!(r.total, r.mle);
    }

    proptest! {
        #[test]
        fn total_increases_with_emotion_loss(
            mle in 0.0f64..10.0, emo in 0.0f64..10.0, bump in 0.01f64..5.0, w in 0.001f64..1.0,
        ) {
            let p = ParamStore::new();
            let mut g = Graph::new(&p);
            let (m, e, e2) = (g.scalar(mle), g.scalar(emo), g.scalar(emo + bump));
            let (_, a) = total_loss(&mut g, m, e, w, 1).unwrap();
            let (_, b) = total_loss(&mut g, m, e2, w, 1).unwrap();
            prop_assert!(b.total > a.total);
        }

        #[test]
        fn step_embedding_has_embedding_width(k in 1usize..=6, seed in 0u64..1000) {
            let mut rng = Rng::new(seed);
            let mut p = ParamStore::new();
            p.add("t", Tensor::uniform(vec![6, 3], -1.0, 1.0, &mut rng)).unwrap();
            let mut g = Graph::new(&p);
            let t = g.param_named("t").unwrap();
            let raw: Vec<f64> = (0..6).map(|_| rng.next_f64()).collect();
            let z: f64 = raw.iter().sum();
            let d = g.vector(raw.iter().map(|x| x / z).collect());
            let e = step_embedding(&mut g, d, t, k, None).unwrap();
            prop_assert_eq!(g.shape(e), &[3]);
        }
    }
}
