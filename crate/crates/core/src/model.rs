//! Model configuration and parameter layout.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::corpus::{EmotionCategory, Granularity};
use crate::error::{Error, Result};
use crate::tensor::{Graph, ParamStore, Rng, Tensor, Var};

/// How the emotion embedding enters the decoder input.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Fusion {
    None,
    Simple,
    Dynamic,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CopyMode {
    Off,
    Hierarchical,
}

impl FromStr for Fusion {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "none" => Ok(Fusion::None),
            "simple" => Ok(Fusion::Simple),
            "dynamic" => Ok(Fusion::Dynamic),
            _ => Err(Error::Config(format!(
                "unknown fusion {s:?}; expected none, simple or dynamic"
            ))),
        }
    }
}

impl FromStr for CopyMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "off" => Ok(CopyMode::Off),
            "hierarchical" | "hc" => Ok(CopyMode::Hierarchical),
            _ => Err(Error::Config(format!(
                "unknown copy mode {s:?}; expected off or hierarchical"
            ))),
        }
    }
}

impl fmt::Display for Fusion {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Fusion::None => "none",
            Fusion::Simple => "simple",
            Fusion::Dynamic => "dynamic",
        })
    }
}

impl fmt::Display for CopyMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            CopyMode::Off => "off",
            CopyMode::Hierarchical => "hierarchical",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub d_emb: usize,
    pub d_h: usize,
    pub word_layers: usize,
    pub sent_layers: usize,
    pub dec_layers: usize,
    pub granularity: Granularity,
    pub fusion: Fusion,
    pub copy: CopyMode,
}

impl ModelConfig {
    pub fn n_labels(&self) -> usize {
        self.granularity.n_labels()
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("vocab_size", self.vocab_size),
            ("d_emb", self.d_emb),
            ("d_h", self.d_h),
            ("word_layers", self.word_layers),
            ("sent_layers", self.sent_layers),
            ("dec_layers", self.dec_layers),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if self.vocab_size <= crate::corpus::EOS {
            return Err(Error::Config(
                "vocabulary must extend past the reserved ids".into(),
            ));
        }
        Ok(())
    }

    /// Emotion embedding row for `emotion`, or `None` without fusion.
    pub fn emotion_vector(&self, g: &mut Graph, emotion: EmotionCategory) -> Result<Option<Var>> {
        self.check_emotion(emotion)?;
        if self.fusion == Fusion::None {
            return Ok(None);
        }
        let table = g.param_named(names::EMOTION)?;
        g.embedding_row(table, emotion.label()).map(Some)
    }

    pub fn check_emotion(&self, emotion: EmotionCategory) -> Result<()> {
        if emotion.granularity() != self.granularity {
            return Err(Error::Config(format!(
                "model is trained for {} emotions, got {} label {}",
                self.granularity,
                emotion.granularity(),
                emotion
            )));
        }
        Ok(())
    }

    /// Number of scalar parameters [`Model::new`] allocates.
    pub fn param_count(&self) -> usize {
        let (v, e, h, l) = (self.vocab_size, self.d_emb, self.d_h, self.n_labels());
        let lstm = |d_in: usize| 4 * h * (d_in + h) + 4 * h;
        let stack = |first_in: usize, layers: usize| lstm(first_in) + (layers - 1) * lstm(h);
        let mut n = v * e
            + stack(e, self.word_layers)
            + stack(h, self.sent_layers)
            + stack(e, self.dec_layers)
            + v * h
            + e * l;
        if self.fusion != Fusion::None {
            n += l * e;
        }
        if self.fusion == Fusion::Dynamic {
            n += 2 * (e * (e + h) + e);
        }
        n += match self.copy {
            CopyMode::Off => h * h + h * 2 * h + h,
            CopyMode::Hierarchical => 2 * h * h + h * 2 * h + h + h + h + e + 1,
        };
        n
    }
}

/// Configuration plus trained parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ParamStore,
}

pub(crate) mod names {
    pub const EMBEDDING: &str = "embedding";
    pub const EMOTION: &str = "emotion";
    pub const FUSE_W_E: &str = "fuse.w_e";
    pub const FUSE_B_E: &str = "fuse.b_e";
    pub const FUSE_W_W: &str = "fuse.w_w";
    pub const FUSE_B_W: &str = "fuse.b_w";
    pub const ATTN_W_G: &str = "attn.w_g";
    pub const ATTN_W_A: &str = "attn.w_a";
    pub const ATTN_B_A: &str = "attn.b_a";
    pub const COPY_W_X: &str = "copy.w_x";
    pub const COPY_W_Y: &str = "copy.w_y";
    pub const COPY_W_A: &str = "copy.w_a";
    pub const COPY_B_A: &str = "copy.b_a";
    pub const COPY_W_PA: &str = "copy.w_pa";
    pub const COPY_W_PS: &str = "copy.w_ps";
    pub const COPY_W_PE: &str = "copy.w_pe";
    pub const COPY_B_PTR: &str = "copy.b_ptr";
    pub const OUT_W_P: &str = "out.w_p";
    pub const EMO_HEAD: &str = "emo_head.w_g";

    pub fn lstm(stack: &str, layer: usize, part: &str) -> String {
        format!("{stack}.l{layer}.{part}")
    }
}

pub const WORD_STACK: &str = "enc.word";
pub const SENT_STACK: &str = "enc.sent";
pub const DEC_STACK: &str = "dec";

/// Range of the uniform initializer.
pub const INIT_SCALE: f32 = 0.08;

impl Model {
    /// Allocates every parameter with `uniform(-0.08, 0.08)` in a fixed order.
    pub fn new(config: ModelConfig, rng: &mut Rng) -> Result<Self> {
        config.validate()?;
        let (v, e, h, l) = (
            config.vocab_size,
            config.d_emb,
            config.d_h,
            config.n_labels(),
        );
        let mut params = ParamStore::new();
        let mut add = |name: &str, shape: Vec<usize>| -> Result<()> {
            params.add(name, Tensor::uniform(shape, -INIT_SCALE, INIT_SCALE, rng))?;
            Ok(())
        };
        add(names::EMBEDDING, vec![v, e])?;
        for (stack, first_in, layers) in [
            (WORD_STACK, e, config.word_layers),
            (SENT_STACK, h, config.sent_layers),
            (DEC_STACK, e, config.dec_layers),
        ] {
            for layer in 0..layers {
                let d_in = if layer == 0 { first_in } else { h };
                add(&names::lstm(stack, layer, "w"), vec![4 * h, d_in + h])?;
                add(&names::lstm(stack, layer, "b"), vec![4 * h])?;
            }
        }
        if config.fusion != Fusion::None {
            add(names::EMOTION, vec![l, e])?;
        }
        if config.fusion == Fusion::Dynamic {
            add(names::FUSE_W_E, vec![e, e + h])?;
            add(names::FUSE_B_E, vec![e])?;
            add(names::FUSE_W_W, vec![e, e + h])?;
            add(names::FUSE_B_W, vec![e])?;
        }
        match config.copy {
            CopyMode::Off => {
                add(names::ATTN_W_G, vec![h, h])?;
                add(names::ATTN_W_A, vec![h, 2 * h])?;
                add(names::ATTN_B_A, vec![h])?;
            }
            CopyMode::Hierarchical => {
                add(names::COPY_W_X, vec![h, h])?;
                add(names::COPY_W_Y, vec![h, h])?;
                add(names::COPY_W_A, vec![h, 2 * h])?;
                add(names::COPY_B_A, vec![h])?;
                add(names::COPY_W_PA, vec![h])?;
                add(names::COPY_W_PS, vec![h])?;
                add(names::COPY_W_PE, vec![e])?;
                add(names::COPY_B_PTR, vec![1])?;
            }
        }
        add(names::OUT_W_P, vec![v, h])?;
        add(names::EMO_HEAD, vec![e, l])?;
        Ok(Self { config, params })
    }

    pub fn param_count(&self) -> usize {
        self.params.num_elements()
    }

    pub fn emotion_vector(&self, g: &mut Graph, emotion: EmotionCategory) -> Result<Option<Var>> {
        self.config.emotion_vector(g, emotion)
    }
}

/// Dropout source for a forward pass; inert outside training.
pub struct Dropout<'r> {
    rate: f64,
    rng: Option<&'r mut Rng>,
}

impl<'r> Dropout<'r> {
    pub fn train(rate: f64, rng: &'r mut Rng) -> Self {
        Self {
            rate,
            rng: Some(rng),
        }
    }

    pub fn off() -> Self {
        Self {
            rate: 0.0,
            rng: None,
        }
    }

    pub fn apply(&mut self, g: &mut Graph, x: Var) -> Result<Var> {
        match self.rng.as_deref_mut() {
            Some(rng) => g.dropout(x, self.rate, rng, true),
            None => Ok(x),
        }
    }
}

/// Runs a stack of LSTM layers one step. `state` holds `(h, c)` per layer
/// and is replaced; returns the top-layer output.
pub(crate) fn lstm_stack_step(
    g: &mut Graph,
    stack: &str,
    x: Var,
    state: &mut [(Var, Var)],
    drop: &mut Dropout,
) -> Result<Var> {
    let mut input = x;
    for (layer, hc) in state.iter_mut().enumerate() {
        if layer > 0 {
            input = drop.apply(g, input)?;
        }
        let w = g.param_named(&names::lstm(stack, layer, "w"))?;
        let b = g.param_named(&names::lstm(stack, layer, "b"))?;
        let (h, c) = g.lstm_cell(input, hc.0, hc.1, w, b)?;
        *hc = (h, c);
        input = h;
    }
    Ok(input)
}
