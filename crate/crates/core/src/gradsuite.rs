//! Finite-difference checks for every differentiable piece of the model, on
//! small width-8 shapes.

use crate::corpus::{EmotionCategory, Example, Granularity, BOS, EOS};
use crate::decoder::{attend_sentences, decode_step, fuse_dynamic, DecoderState, Overrides};
use crate::encoder::encode_article;
use crate::error::Result;
use crate::losses::{emotion_loss, example_loss, top_k, LossConfig};
use crate::model::{names, CopyMode, Dropout, Fusion, Model, ModelConfig};
use crate::tensor::{grad_check, GradCheckReport, Graph, ParamStore, Rng, Tensor, Var};

/// Checks pass below this relative error.
pub const TOLERANCE: f64 = 1e-3;

const W: usize = 8;

#[derive(Clone, Debug)]
pub struct CheckResult {
    pub name: String,
    pub max_rel_error: f64,
    /// Parameter with the largest error.
    pub worst: String,
}

impl CheckResult {
    pub fn passed(&self) -> bool {
        self.max_rel_error < TOLERANCE
    }
}

fn summarize(name: &str, report: GradCheckReport) -> CheckResult {
    let worst = report.worst().map(|e| e.name.clone()).unwrap_or_default();
    CheckResult {
        name: name.to_string(),
        max_rel_error: report.max_rel_error(),
        worst,
    }
}

/// Reduces `x` to a scalar with fixed pseudo-random weights.
fn probe(g: &mut Graph, x: Var, salt: u64) -> Result<Var> {
    let shape = g.shape(x).to_vec();
    let n = g.numel(x);
    let mut rng = Rng::new(0xfeed ^ salt);
    let w = (0..n).map(|_| rng.next_f64() * 2.0 - 1.0).collect();
    let c = g.constant(shape, w)?;
    let m = g.mul(x, c)?;
    Ok(g.sum(m))
}

fn store(shapes: &[(&str, Vec<usize>)], seed: u64) -> Result<ParamStore> {
    let mut rng = Rng::new(seed);
    let mut p = ParamStore::new();
    for (name, shape) in shapes {
        p.add(*name, Tensor::uniform(shape.clone(), -1.0, 1.0, &mut rng))?;
    }
    Ok(p)
}

type OpFn = Box<dyn Fn(&mut Graph) -> Result<Var>>;

fn p(g: &mut Graph, name: &str) -> Result<Var> {
    g.param_named(name)
}

/// The op catalogue at width `w` (at least 2).
fn op_cases(w: usize) -> Vec<(&'static str, OpFn)> {
    let last = w - 1;
    vec![
        (
            "matmul",
            Box::new(|g| {
                let (a, b) = (p(g, "m")?, p(g, "n")?);
                let y = g.matmul(a, b)?;
                probe(g, y, 1)
            }),
        ),
        (
            "matmul_vec",
            Box::new(|g| {
                let (a, v, u) = (p(g, "m")?, p(g, "v")?, p(g, "u")?);
                let y = g.matmul(a, v)?;
                let z = g.matmul(u, a)?;
                let s = g.add(y, z)?;
                probe(g, s, 2)
            }),
        ),
        (
            "add_sub_mul",
            Box::new(|g| {
                let (v, u) = (p(g, "v")?, p(g, "u")?);
                let a = g.add(v, u)?;
                let b = g.sub(v, u)?;
                let c = g.mul(a, b)?;
                probe(g, c, 3)
            }),
        ),
        (
            "scale_one_minus",
            Box::new(|g| {
                let v = p(g, "v")?;
                let a = g.scale(v, -1.7);
                let b = g.one_minus(a);
                let c = g.mul(b, v)?;
                probe(g, c, 4)
            }),
        ),
        (
            "mul_scalar",
            Box::new(move |g| {
                let (v, u) = (p(g, "v")?, p(g, "u")?);
                let s = g.pick(u, last)?;
                let y = g.mul_scalar(v, s)?;
                probe(g, y, 5)
            }),
        ),
        (
            "sigmoid_tanh",
            Box::new(|g| {
                let v = p(g, "v")?;
                let a = g.sigmoid(v);
                let b = g.tanh(v);
                let c = g.mul(a, b)?;
                probe(g, c, 6)
            }),
        ),
        (
            "softmax",
            Box::new(|g| {
                let m = p(g, "m")?;
                let a = g.softmax(m, 0)?;
                let b = g.softmax(m, 1)?;
                let c = g.add(a, b)?;
                probe(g, c, 7)
            }),
        ),
        (
            "log_softmax",
            Box::new(|g| {
                let m = p(g, "m")?;
                let a = g.log_softmax(m, 1)?;
                probe(g, a, 8)
            }),
        ),
        (
            "log_clamped",
            Box::new(|g| {
                let v = p(g, "v")?;
                let s = g.sigmoid(v);
                let l = g.log_clamped(s, 1e-12);
                probe(g, l, 9)
            }),
        ),
        (
            "concat",
            Box::new(|g| {
                let (m, n) = (p(g, "m")?, p(g, "n")?);
                let a = g.concat(&[m, n], 0)?;
                let b = g.concat(&[m, n], 1)?;
                let (x, y) = (probe(g, a, 10)?, probe(g, b, 11)?);
                g.add(x, y)
            }),
        ),
        (
            "slice_stack",
            Box::new(move |g| {
                let (v, u) = (p(g, "v")?, p(g, "u")?);
                let s = g.slice(v, 1, last)?;
                let t = g.slice(u, 0, last)?;
                let st = g.stack(&[s, t, s])?;
                probe(g, st, 12)
            }),
        ),
        (
            "gather_pick",
            Box::new(move |g| {
                let v = p(g, "v")?;
                let a = g.gather(v, &[1, 1, last, 0])?;
                let b = g.pick(v, last)?;
                let x = probe(g, a, 13)?;
                g.add(x, b)
            }),
        ),
        (
            "embedding_lookup",
            Box::new(move |g| {
                let t = p(g, "n")?;
                let a = g.embedding_lookup(t, &[last, 0, last, 1])?;
                let b = g.embedding_row(t, last / 2)?;
                let (x, y) = (probe(g, a, 14)?, probe(g, b, 15)?);
                g.add(x, y)
            }),
        ),
        (
            "scatter_add",
            Box::new(move |g| {
                let v = p(g, "v")?;
                let idx: Vec<usize> = (0..=last).map(|i| (i * 5 + 1) % (w + 2)).collect();
                let y = g.scatter_add(v, &idx, w + 2)?;
                probe(g, y, 16)
            }),
        ),
        (
            "sum_mean_add_all",
            Box::new(|g| {
                let (v, u) = (p(g, "v")?, p(g, "u")?);
                let a = g.add_all(&[v, u, v])?;
                let sq = g.mul(a, a)?;
                let s = g.sum(sq);
                let m = g.mean(v);
                g.add(s, m)
            }),
        ),
        (
            "cross_entropy",
            Box::new(move |g| {
                let v = p(g, "v")?;
                let l = g.log_softmax(v, 0)?;
                g.cross_entropy(l, last / 2)
            }),
        ),
        (
            "dropout",
            Box::new(|g| {
                let v = p(g, "v")?;
                let mut rng = Rng::new(3);
                let d = g.dropout(v, 0.3, &mut rng, true)?;
                let t = g.tanh(d);
                probe(g, t, 17)
            }),
        ),
        (
            "lstm_cell",
            Box::new(|g| {
                let (x, h, c) = (p(g, "v")?, p(g, "u")?, p(g, "c")?);
                let (w, b) = (p(g, "lstm.w")?, p(g, "lstm.b")?);
                let (h1, c1) = g.lstm_cell(x, h, c, w, b)?;
                let (h2, c2) = g.lstm_cell(h1, h1, c1, w, b)?;
                let (a, z) = (probe(g, h2, 18)?, probe(g, c2, 19)?);
                g.add(a, z)
            }),
        ),
    ]
}

fn op_store(w: usize, seed: u64) -> Result<ParamStore> {
    store(
        &[
            ("m", vec![w, w]),
            ("n", vec![w, w]),
            ("v", vec![w]),
            ("u", vec![w]),
            ("c", vec![w]),
            ("lstm.w", vec![4 * w, 2 * w]),
            ("lstm.b", vec![4 * w]),
        ],
        seed,
    )
}

/// Runs the op catalogue at width `w` with parameters drawn from `seed`.
pub fn run_op_checks(w: usize, seed: u64) -> Result<Vec<CheckResult>> {
    if w < 2 {
        return Err(crate::Error::Config(format!(
            "op checks need width >= 2, got {w}"
        )));
    }
    let mut params = op_store(w, seed)?;
    let mut out = Vec::new();
    for (name, f) in op_cases(w) {
        let r = grad_check(&mut params, None, |g| f(g))?;
        out.push(summarize(name, r));
    }
    Ok(out)
}

/// Op catalogue with a width drawn from `seed` in `2..=9`.
pub fn run_random_op_checks(seed: u64) -> Result<(usize, Vec<CheckResult>)> {
    let w = 2 + Rng::new(seed).fork(0x5a9e).below(8);
    Ok((w, run_op_checks(w, seed)?))
}

fn model_config(fusion: Fusion, copy: CopyMode) -> ModelConfig {
    ModelConfig {
        vocab_size: 12,
        d_emb: W,
        d_h: W,
        word_layers: 1,
        sent_layers: 1,
        dec_layers: 1,
        granularity: Granularity::Fine,
        fusion,
        copy,
    }
}

/// Larger init than training so gates and softmaxes leave their linear range.
fn toy_model(fusion: Fusion, copy: CopyMode) -> Result<Model> {
    let mut m = Model::new(model_config(fusion, copy), &mut Rng::new(21))?;
    for id in m.params.ids().collect::<Vec<_>>() {
        for x in m.params.tensor_mut(id).data_mut() {
            *x *= 6.0;
        }
    }
    Ok(m)
}

fn article() -> Vec<Vec<usize>> {
    vec![vec![4, 5, 6], vec![7, 8]]
}

fn model_cases() -> Result<Vec<CheckResult>> {
    let mut out = Vec::new();

    let mut m = toy_model(Fusion::None, CopyMode::Off)?;
    let cfg = m.config.clone();
    let r = grad_check(&mut m.params, None, |g| {
        let enc = encode_article(g, &cfg, &article(), None, None, &mut Dropout::off())?;
        let (a, _) = attend_sentences(g, enc.article_state, enc.sentence_matrix)?;
        let x = probe(g, a, 30)?;
        let y = probe(g, enc.all_words, 31)?;
        g.add(x, y)
    })?;
    out.push(summarize("encoder_and_sentence_attention", r));

    let mut m = toy_model(Fusion::Dynamic, CopyMode::Off)?;
    let ids: Vec<_> = [
        names::FUSE_W_E,
        names::FUSE_B_E,
        names::FUSE_W_W,
        names::FUSE_B_W,
        names::EMOTION,
    ]
    .iter()
    .map(|n| m.params.id(n))
    .collect::<Result<_>>()?;
    let r = grad_check(&mut m.params, Some(&ids), |g| {
        let table = g.param_named(names::EMOTION)?;
        let v = g.embedding_row(table, 2)?;
        let e = g.vector((0..W).map(|i| (i as f64).sin()).collect());
        let s = g.vector((0..W).map(|i| (i as f64 * 0.3).cos()).collect());
        let f = fuse_dynamic(g, v, e, s, None)?;
        probe(g, f, 32)
    })?;
    out.push(summarize("dynamic_fusion", r));

    let mut m = toy_model(Fusion::Dynamic, CopyMode::Hierarchical)?;
    let cfg = m.config.clone();
    let r = grad_check(&mut m.params, None, |g| {
        let enc = encode_article(g, &cfg, &article(), None, None, &mut Dropout::off())?;
        let emotion = cfg.emotion_vector(g, EmotionCategory::new(Granularity::Fine, 1)?)?;
        let state = DecoderState::init(g, &cfg, &enc);
        let ov = Overrides::default();
        let (o1, state) =
            decode_step(g, &cfg, BOS, &state, &enc, emotion, &mut Dropout::off(), ov)?;
        let (o2, _) = decode_step(g, &cfg, 6, &state, &enc, emotion, &mut Dropout::off(), ov)?;
        let l1 = g.log_clamped(o1.final_dist, 1e-12);
        let l2 = g.log_clamped(o2.final_dist, 1e-12);
        let (a, b) = (g.pick(l1, 6)?, g.pick(l2, 8)?);
        g.add(a, b)
    })?;
    out.push(summarize("copy_path", r));

    let mut m = toy_model(Fusion::Dynamic, CopyMode::Hierarchical)?;
    let cfg = m.config.clone();
    let selections: Vec<Vec<usize>> = {
        let mut g = Graph::inference(&m.params);
        emotion_dists(&mut g, &cfg)?
            .iter()
            .map(|&d| top_k(g.value(d), 4))
            .collect::<Result<_>>()?
    };
    let r = grad_check(&mut m.params, None, |g| {
        let dists = emotion_dists(g, &cfg)?;
        let table = g.param_named(names::EMBEDDING)?;
        let head = g.param_named(names::EMO_HEAD)?;
        emotion_loss(g, &dists, table, head, 3, 4, Some(&selections))
    })?;
    out.push(summarize("emotion_loss_topk", r));

    for (name, fusion, copy) in [
        ("combined_loss", Fusion::Dynamic, CopyMode::Hierarchical),
        ("combined_loss_simple_nocopy", Fusion::Simple, CopyMode::Off),
    ] {
        let mut m = toy_model(fusion, copy)?;
        let cfg = m.config.clone();
        let example = Example {
            article: article(),
            comment: vec![BOS, 5, 9, 10, 7, 11, EOS],
            emotion: EmotionCategory::new(Granularity::Fine, 4)?,
        };
        let loss = LossConfig {
            emo_weight: 0.5,
            top_k: cfg.vocab_size,
        };
        let r = grad_check(&mut m.params, None, |g| {
            example_loss(g, &cfg, &example, loss, &mut Dropout::off()).map(|(t, _)| t)
        })?;
        out.push(summarize(name, r));
    }
    Ok(out)
}

fn emotion_dists(g: &mut Graph, cfg: &ModelConfig) -> Result<Vec<Var>> {
    let enc = encode_article(g, cfg, &article(), None, None, &mut Dropout::off())?;
    let emotion = cfg.emotion_vector(g, EmotionCategory::new(Granularity::Fine, 3)?)?;
    let mut state = DecoderState::init(g, cfg, &enc);
    let mut dists = Vec::new();
    for prev in [BOS, 5, 9] {
        let (o, next) = decode_step(
            g,
            cfg,
            prev,
            &state,
            &enc,
            emotion,
            &mut Dropout::off(),
            Overrides::default(),
        )?;
        dists.push(o.final_dist);
        state = next;
    }
    Ok(dists)
}

/// Runs every check at width 8 and returns one result per check.
pub fn run_grad_suite() -> Result<Vec<CheckResult>> {
    let mut out = run_op_checks(W, 11)?;
    out.extend(model_cases()?);
    Ok(out)
}
