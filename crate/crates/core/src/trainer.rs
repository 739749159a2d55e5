//! Teacher-forced training loop.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::corpus::{make_batches, Batch, Example, Granularity};
use crate::error::{Error, Result};
use crate::losses::{example_loss, teacher_forced_loss, LossConfig, LossReport, TeacherForced};
use crate::model::{names, CopyMode, Dropout, Fusion, Model, ModelConfig};
use crate::tensor::{adam_step, AdamConfig, AdamState, Gradients, Graph, Rng};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub d_emb: usize,
    pub d_h: usize,
    pub word_layers: usize,
    pub sent_layers: usize,
    pub dec_layers: usize,
    pub dropout: f64,
    pub batch_size: usize,
    pub adam: AdamConfig,
    pub clip_norm: f64,
    pub emo_weight: f64,
    pub top_k: usize,
    pub epochs: usize,
    pub seed: u64,
    pub fusion: Fusion,
    pub copy: CopyMode,
    pub granularity: Granularity,
    pub max_vocab: usize,
    /// Keep the emotion classifier head at its initial values.
    pub freeze_emo_head: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            d_emb: 64,
            d_h: 64,
            word_layers: 1,
            sent_layers: 1,
            dec_layers: 1,
            dropout: 0.3,
            batch_size: 16,
            adam: AdamConfig::default(),
            clip_norm: 5.0,
            emo_weight: 0.01,
            top_k: 50,
            epochs: 10,
            seed: 42,
            fusion: Fusion::Dynamic,
            copy: CopyMode::Hierarchical,
            granularity: Granularity::Fine,
            max_vocab: 5000,
            freeze_emo_head: false,
        }
    }
}

impl TrainConfig {
    /// Full-size dimensions: 512-wide, two layers everywhere, batch 64.
    pub fn paper_scale(mut self) -> Self {
        self.d_emb = 512;
        self.d_h = 512;
        self.word_layers = 2;
        self.sent_layers = 2;
        self.dec_layers = 2;
        self.batch_size = 64;
        self
    }

    pub fn loss(&self) -> LossConfig {
        LossConfig {
            emo_weight: self.emo_weight,
            top_k: self.top_k,
        }
    }

    pub fn model_config(&self, vocab_size: usize) -> ModelConfig {
        ModelConfig {
            vocab_size,
            d_emb: self.d_emb,
            d_h: self.d_h,
            word_layers: self.word_layers,
            sent_layers: self.sent_layers,
            dec_layers: self.dec_layers,
            granularity: self.granularity,
            fusion: self.fusion,
            copy: self.copy,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!(
                "dropout {} outside [0, 1)",
                self.dropout
            )));
        }
        for (name, v) in [
            ("batch_size", self.batch_size),
            ("top_k", self.top_k),
            ("max_vocab", self.max_vocab),
        ] {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        let positive = |x: f64| x > 0.0;
        if !positive(self.adam.lr)
            || !positive(self.clip_norm)
            || self.emo_weight.is_nan()
            || self.emo_weight < 0.0
        {
            return Err(Error::Config(
                "learning rate and clip norm must be positive, emotion weight non-negative".into(),
            ));
        }
        Ok(())
    }
}

/// One line of the training log.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub epoch: usize,
    pub step: u64,
    pub mle: f64,
    pub emo: f64,
    pub total: f64,
}

/// Token-weighted means over one epoch.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochReport {
    pub epoch: usize,
    pub mle: f64,
    pub emo: f64,
    pub total: f64,
    pub tokens: usize,
}

pub struct Trainer {
    pub model: Model,
    pub config: TrainConfig,
    pub adam: AdamState,
    pub step: u64,
    pub epoch: usize,
}

const DROPOUT_STREAM: u64 = 0x5eed_d70b;

impl Trainer {
    pub fn new(config: TrainConfig, vocab_size: usize) -> Result<Self> {
        config.validate()?;
        let model = Model::new(config.model_config(vocab_size), &mut Rng::new(config.seed))?;
        log::info!(
            "model has {} parameters ({} fusion, copy {})",
            model.param_count(),
            config.fusion,
            config.copy
        );
        let adam = AdamState::new(&model.params);
        Ok(Self {
            model,
            config,
            adam,
            step: 0,
            epoch: 0,
        })
    }

    /// Accumulates the batch gradient and returns the token-weighted report.
    pub fn batch_gradients(&self, batch: &Batch, grads: &mut Gradients) -> Result<LossReport> {
        let cfg = &self.model.config;
        let batch_tokens: usize = batch
            .comment_mask
            .iter()
            .map(|m| m.iter().filter(|&&b| b).count().saturating_sub(1))
            .sum();
        if batch_tokens == 0 {
            return Err(Error::Data("batch has no target tokens".into()));
        }
        let drop_root = Rng::new(self.config.seed).fork(DROPOUT_STREAM);
        let mut sum = LossReport {
            mle: 0.0,
            emo: 0.0,
            total: 0.0,
            tokens: 0,
        };
        for i in 0..batch.len() {
            let input = TeacherForced {
                article: &batch.articles[i],
                token_mask: Some(&batch.token_mask[i]),
                sentence_mask: Some(&batch.sentence_mask[i]),
                comment: &batch.comments[i],
                comment_mask: Some(&batch.comment_mask[i]),
                emotion: batch.emotions[i],
            };
            let mut rng = drop_root.fork(self.step.wrapping_mul(1 << 16) + i as u64);
            let mut drop = if self.config.dropout > 0.0 {
                Dropout::train(self.config.dropout, &mut rng)
            } else {
                Dropout::off()
            };
            let mut g = Graph::new(&self.model.params);
            let (total, report) =
                teacher_forced_loss(&mut g, cfg, &input, self.config.loss(), &mut drop)?;
            if !report.total.is_finite() {
                return Err(Error::Training(format!(
                    "non-finite loss {} at epoch {} step {} (batch member {}, example {})",
                    report.total, self.epoch, self.step, i, batch.indices[i]
                )));
            }
            let weight = report.tokens as f64 / batch_tokens as f64;
            let weighted = g.scale(total, weight);
            g.backward(weighted, grads)?;
            sum.mle += weight * report.mle;
            sum.emo += weight * report.emo;
            sum.total += weight * report.total;
            sum.tokens += report.tokens;
        }
        Ok(sum)
    }

    /// Forward, backward, clip and one Adam update.
    pub fn train_batch(&mut self, batch: &Batch) -> Result<LossReport> {
        let mut grads = Gradients::zeros(&self.model.params);
        let report = self.batch_gradients(batch, &mut grads)?;
        if self.config.freeze_emo_head {
            let id = self.model.params.id(names::EMO_HEAD)?;
            grads.get_mut(id).fill(0.0);
        }
        grads.clip_global_norm(self.config.clip_norm);
        adam_step(
            &mut self.model.params,
            &grads,
            &mut self.adam,
            &self.config.adam,
        )
        .map_err(|e| Error::Training(format!("epoch {} step {}: {e}", self.epoch, self.step)))?;
        self.step += 1;
        Ok(report)
    }

    /// One pass over `examples` in a seeded shuffled order.
    pub fn train_epoch(
        &mut self,
        examples: &[Example],
        mut log: Option<&mut dyn Write>,
    ) -> Result<EpochReport> {
        if examples.is_empty() {
            return Err(Error::Data("cannot train on an empty corpus".into()));
        }
        self.epoch += 1;
        let mut order_rng = Rng::new(self.config.seed).fork(self.epoch as u64);
        let batches = make_batches(examples, self.config.batch_size, &mut order_rng)?;
        let mut acc = EpochReport {
            epoch: self.epoch,
            mle: 0.0,
            emo: 0.0,
            total: 0.0,
            tokens: 0,
        };
        for batch in &batches {
            let r = self.train_batch(batch)?;
            let t = r.tokens as f64;
            acc.mle += r.mle * t;
            acc.emo += r.emo * t;
            acc.total += r.total * t;
            acc.tokens += r.tokens;
            if let Some(w) = log.as_mut() {
                let rec = LogRecord {
                    epoch: self.epoch,
                    step: self.step,
                    mle: r.mle,
                    emo: r.emo,
                    total: r.total,
                };
                serde_json::to_writer(&mut **w, &rec)?;
                writeln!(w)?;
            }
        }
        let t = acc.tokens.max(1) as f64;
        acc.mle /= t;
        acc.emo /= t;
        acc.total /= t;
        log::info!(
            "epoch {} step {}: mle {:.4} emo {:.4} total {:.4}",
            acc.epoch,
            self.step,
            acc.mle,
            acc.emo,
            acc.total
        );
        Ok(acc)
    }

    /// Runs `config.epochs` epochs.
    pub fn fit(
        &mut self,
        examples: &[Example],
        mut log: Option<&mut dyn Write>,
    ) -> Result<Vec<EpochReport>> {
        let mut reports = Vec::with_capacity(self.config.epochs);
        for _ in 0..self.config.epochs {
            let log: Option<&mut dyn Write> = match log {
                Some(ref mut w) => Some(&mut **w),
                None => None,
            };
            reports.push(self.train_epoch(examples, log)?);
        }
        Ok(reports)
    }
}

/// Builds a trainer and runs it to completion.
pub fn train(
    examples: &[Example],
    vocab_size: usize,
    config: TrainConfig,
    log: Option<&mut dyn Write>,
) -> Result<(Trainer, Vec<EpochReport>)> {
    let mut trainer = Trainer::new(config, vocab_size)?;
    let reports = trainer.fit(examples, log)?;
    Ok((trainer, reports))
}

/// Token-weighted loss of `model` on `examples` with dropout off and no updates.
pub fn evaluate_loss(model: &Model, examples: &[Example], loss: LossConfig) -> Result<EpochReport> {
    if examples.is_empty() {
        return Err(Error::Data("cannot evaluate on an empty corpus".into()));
    }
    let mut acc = EpochReport {
        epoch: 0,
        mle: 0.0,
        emo: 0.0,
        total: 0.0,
        tokens: 0,
    };
    for e in examples {
        let mut g = Graph::inference(&model.params);
        let (_, r) = example_loss(&mut g, &model.config, e, loss, &mut Dropout::off())?;
        let t = r.tokens as f64;
        acc.mle += r.mle * t;
        acc.emo += r.emo * t;
        acc.total += r.total * t;
        acc.tokens += r.tokens;
    }
    let t = acc.tokens.max(1) as f64;
    acc.mle /= t;
    acc.emo /= t;
    acc.total /= t;
    Ok(acc)
}
