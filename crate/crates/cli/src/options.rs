//! Flag groups shared by subcommands and their resolution against a config
//! file.

use std::fs;
use std::path::{Path, PathBuf};

use ccs_core::corpus::Granularity;
use ccs_core::decoding::{SearchConfig, SearchMode};
use ccs_core::model::{CopyMode, Fusion};
use ccs_core::trainer::TrainConfig;
use ccs_core::{Error, Result};
use clap::Args;
use serde::Deserialize;

/// Flat key-value config file. Keys are flag names with `_` for `-`.
#[derive(Clone, Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileConfig {
    pub seed: Option<u64>,
    pub granularity: Option<Granularity>,
    pub fusion: Option<Fusion>,
    pub copy: Option<CopyMode>,
    pub emo_weight: Option<f64>,
    pub topk: Option<usize>,
    pub paper_scale: Option<bool>,
    pub epochs: Option<usize>,
    pub lr: Option<f64>,
    pub d_h: Option<usize>,
    pub d_emb: Option<usize>,
    pub layers: Option<usize>,
    pub batch_size: Option<usize>,
    pub dropout: Option<f64>,
    pub decode: Option<SearchMode>,
    pub beam_size: Option<usize>,
    pub rbs_n: Option<usize>,
    pub rbs_eta: Option<f64>,
    pub max_len: Option<usize>,
    pub length_norm: Option<bool>,
}

impl FileConfig {
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        let text = fs::read_to_string(path)?;
        toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }
}

#[derive(Args, Clone, Debug, Default)]
pub struct ConfigFlag {
    /// Flat TOML file of option values (keys as flag names, `_` for `-`);
    /// command-line flags take precedence [default: none]
    #[arg(long, value_name = "FILE")]
    pub config: Option<PathBuf>,
}

#[derive(Args, Clone, Debug, Default)]
pub struct ModelFlags {
    /// Seed for initialization, dropout and shuffling [default: 42]
    #[arg(long)]
    pub seed: Option<u64>,
    /// Emotion label set {coarse, fine} [default: taken from the corpus]
    #[arg(long, value_name = "GRANULARITY")]
    pub granularity: Option<Granularity>,
    /// How the emotion embedding enters the decoder {none, simple, dynamic}
    /// [default: dynamic]
    #[arg(long, value_name = "MODE")]
    pub fusion: Option<Fusion>,
    /// Copy mechanism {off, hierarchical} [default: hierarchical]
    #[arg(long, value_name = "MODE")]
    pub copy: Option<CopyMode>,
    /// Weight of the emotion classification loss [default: 0.01]
    #[arg(long, value_name = "W")]
    pub emo_weight: Option<f64>,
    /// Tokens per step in the emotion loss [default: 50]
    #[arg(long, value_name = "K")]
    pub topk: Option<usize>,
    /// Use 512-dimensional states, 2-layer LSTMs and batch size 64
    /// [default: off]
    #[arg(long)]
    pub paper_scale: bool,
    /// Training epochs [default: 10]
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Adam learning rate [default: 0.001]
    #[arg(long)]
    pub lr: Option<f64>,
    /// Hidden state size [default: 64]
    #[arg(long, value_name = "N")]
    pub d_h: Option<usize>,
    /// Embedding size [default: 64]
    #[arg(long, value_name = "N")]
    pub d_emb: Option<usize>,
    /// LSTM layers in each encoder level and the decoder [default: 1]
    #[arg(long, value_name = "N")]
    pub layers: Option<usize>,
    /// Examples per batch [default: 16]
    #[arg(long, value_name = "N")]
    pub batch_size: Option<usize>,
    /// Dropout rate [default: 0.3]
    #[arg(long, value_name = "RATE")]
    pub dropout: Option<f64>,
}

#[derive(Args, Clone, Debug, Default)]
pub struct SearchFlags {
    /// Decoding strategy {greedy, beam, rbs, hard} [default: rbs]
    #[arg(long, value_name = "MODE")]
    pub decode: Option<SearchMode>,
    /// Beam width [default: 5]
    #[arg(long, value_name = "N")]
    pub beam_size: Option<usize>,
    /// n-gram order penalized by restricted beam search [default: 1]
    #[arg(long, value_name = "N")]
    pub rbs_n: Option<usize>,
    /// Probability subtracted per earlier occurrence of the n-gram
    /// [default: 0.5]
    #[arg(long, value_name = "ETA")]
    pub rbs_eta: Option<f64>,
    /// Maximum comment length in tokens [default: 30]
    #[arg(long, value_name = "N")]
    pub max_len: Option<usize>,
}

fn pick<T: Clone>(flag: &Option<T>, file: &Option<T>) -> Option<T> {
    flag.clone().or_else(|| file.clone())
}

impl ModelFlags {
    /// Defaults, then the config file, then flags. `corpus` supplies the
    /// granularity when neither names one.
    pub fn resolve(&self, file: &FileConfig, corpus: Option<Granularity>) -> Result<TrainConfig> {
        let mut cfg = TrainConfig::default();
        if self.paper_scale || file.paper_scale == Some(true) {
            cfg = cfg.paper_scale();
        }
        if let Some(v) = pick(&self.seed, &file.seed) {
            cfg.seed = v;
        }
        if let Some(v) = pick(&self.fusion, &file.fusion) {
            cfg.fusion = v;
        }
        if let Some(v) = pick(&self.copy, &file.copy) {
            cfg.copy = v;
        }
        if let Some(v) = pick(&self.emo_weight, &file.emo_weight) {
            cfg.emo_weight = v;
        }
        if let Some(v) = pick(&self.topk, &file.topk) {
            cfg.top_k = v;
        }
        if let Some(v) = pick(&self.epochs, &file.epochs) {
            cfg.epochs = v;
        }
        if let Some(v) = pick(&self.lr, &file.lr) {
            cfg.adam.lr = v;
        }
        if let Some(v) = pick(&self.d_h, &file.d_h) {
            cfg.d_h = v;
        }
        if let Some(v) = pick(&self.d_emb, &file.d_emb) {
            cfg.d_emb = v;
        }
        if let Some(v) = pick(&self.layers, &file.layers) {
            cfg.word_layers = v;
            cfg.sent_layers = v;
            cfg.dec_layers = v;
        }
        if let Some(v) = pick(&self.batch_size, &file.batch_size) {
            cfg.batch_size = v;
        }
        if let Some(v) = pick(&self.dropout, &file.dropout) {
            cfg.dropout = v;
        }
        match (pick(&self.granularity, &file.granularity), corpus) {
            (Some(g), Some(c)) if g != c => {
                return Err(Error::Config(format!(
                    "granularity {g} requested but the corpus is labelled {c}"
                )))
            }
            (Some(g), _) | (None, Some(g)) => cfg.granularity = g,
            (None, None) => {}
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

impl SearchFlags {
    pub fn resolve(&self, file: &FileConfig) -> Result<SearchConfig> {
        let mut cfg = SearchConfig::default();
        if let Some(v) = pick(&self.decode, &file.decode) {
            cfg.mode = v;
        }
        if let Some(v) = pick(&self.beam_size, &file.beam_size) {
            cfg.beam_size = v;
        }
        if let Some(v) = pick(&self.rbs_n, &file.rbs_n) {
            cfg.n = v;
        }
        if let Some(v) = pick(&self.rbs_eta, &file.rbs_eta) {
            cfg.eta = v;
        }
        if let Some(v) = pick(&self.max_len, &file.max_len) {
            cfg.max_len = v;
        }
        if let Some(v) = file.length_norm {
            cfg.length_norm = v;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}
