//! Binary checkpoint files.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic "CCSCKPT\0" | version u32 | header length u32 | header JSON
//! tensor count u32 | per tensor: name length u32, name, rank u32,
//!                    dims u64 * rank, f32 payload (row-major)
//! ```
//!
//! Tensors are the model parameters followed by `adam.m.<name>` and
//! `adam.v.<name>` when optimizer state is stored.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::Vocab;
use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig};
use crate::tensor::{AdamState, ParamStore, Rng, Tensor};
use crate::trainer::{TrainConfig, Trainer};

pub const MAGIC: &[u8; 8] = b"CCSCKPT\0";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Header {
    model: ModelConfig,
    train: Option<TrainConfig>,
    vocab_hash: String,
    step: u64,
    epoch: usize,
    adam_step: Option<u64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model: Model,
    pub train: Option<TrainConfig>,
    pub adam: Option<AdamState>,
    pub vocab_hash: String,
    pub step: u64,
    pub epoch: usize,
}

impl Checkpoint {
    pub fn from_trainer(trainer: &Trainer, vocab: &Vocab) -> Self {
        Self {
            model: trainer.model.clone(),
            train: Some(trainer.config.clone()),
            adam: Some(trainer.adam.clone()),
            vocab_hash: vocab.hash(),
            step: trainer.step,
            epoch: trainer.epoch,
        }
    }

    /// Fails unless the checkpoint was trained with `vocab`.
    pub fn check_vocab(&self, vocab: &Vocab) -> Result<()> {
        let h = vocab.hash();
        if h != self.vocab_hash {
            return Err(Error::Checkpoint(format!(
                "vocabulary mismatch: checkpoint expects {}, got {h}",
                self.vocab_hash
            )));
        }
        if vocab.len() != self.model.config.vocab_size {
            return Err(Error::Checkpoint(format!(
                "vocabulary has {} entries, model expects {}",
                vocab.len(),
                self.model.config.vocab_size
            )));
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = Header {
            model: self.model.config.clone(),
            train: self.train.clone(),
            vocab_hash: self.vocab_hash.clone(),
            step: self.step,
            epoch: self.epoch,
            adam_step: self.adam.as_ref().map(|a| a.step),
        };
        let json = serde_json::to_vec(&header)?;
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u32).to_le_bytes());
        out.extend_from_slice(&json);

        let params = &self.model.params;
        let mut tensors: Vec<(String, &Tensor)> =
            params.iter().map(|(_, n, t)| (n.to_string(), t)).collect();
        if let Some(adam) = &self.adam {
            for (prefix, moments) in [("adam.m.", &adam.m), ("adam.v.", &adam.v)] {
                for ((_, n, _), t) in params.iter().zip(moments) {
                    tensors.push((format!("{prefix}{n}"), t));
                }
            }
        }
        out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
        for (name, t) in tensors {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for &x in t.data() {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(MAGIC.len())? != MAGIC {
            return Err(Error::Checkpoint(
                "not a checkpoint file (bad magic)".into(),
            ));
        }
        let version = r.u32()?;
        if version != FORMAT_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported checkpoint version {version}, expected {FORMAT_VERSION}"
            )));
        }
        let header_len = r.u32()? as usize;
        let header: Header = serde_json::from_slice(r.take(header_len)?)
            .map_err(|e| Error::Checkpoint(format!("corrupt header: {e}")))?;

        let mut model = Model::new(header.model.clone(), &mut Rng::new(0))
            .map_err(|e| Error::Checkpoint(format!("invalid model config: {e}")))?;
        let mut adam = header.adam_step.map(|step| AdamState {
            step,
            ..AdamState::new(&model.params)
        });
        let expected = model.params.len() * if adam.is_some() { 3 } else { 1 };
        let count = r.u32()? as usize;
        if count != expected {
            return Err(Error::Checkpoint(format!(
                "checkpoint holds {count} tensors, expected {expected}"
            )));
        }
        let mut seen = vec![false; expected];
        for _ in 0..count {
            let name_len = r.u32()? as usize;
            let name = std::str::from_utf8(r.take(name_len)?)
                .map_err(|_| Error::Checkpoint("tensor name is not UTF-8".into()))?
                .to_string();
            let rank = r.u32()? as usize;
            let dims = (0..rank)
                .map(|_| r.u64().map(|d| d as usize))
                .collect::<Result<Vec<_>>>()?;
            let numel: usize = dims.iter().product();
            let data: Vec<f32> = r
                .take(numel.checked_mul(4).ok_or_else(|| bad_tensor(&name))?)?
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            let (slot, target) = locate(&mut model.params, adam.as_mut(), &name)?;
            if target.shape() != dims.as_slice() {
                return Err(Error::Checkpoint(format!(
                    "tensor {name} has shape {dims:?}, model expects {:?}",
                    target.shape()
                )));
            }
            target.data_mut().copy_from_slice(&data);
            seen[slot] = true;
        }
        if r.pos != bytes.len() {
            return Err(Error::Checkpoint("trailing bytes after last tensor".into()));
        }
        if seen.iter().any(|s| !s) {
            return Err(Error::Checkpoint("checkpoint is missing tensors".into()));
        }
        Ok(Self {
            model,
            train: header.train,
            adam,
            vocab_hash: header.vocab_hash,
            step: header.step,
            epoch: header.epoch,
        })
    }

    /// Restores a trainer that continues where this checkpoint stopped.
    pub fn into_trainer(self) -> Result<Trainer> {
        let config = self
            .train
            .ok_or_else(|| Error::Checkpoint("checkpoint has no training config".into()))?;
        let adam = self
            .adam
            .unwrap_or_else(|| AdamState::new(&self.model.params));
        Ok(Trainer {
            model: self.model,
            config,
            adam,
            step: self.step,
            epoch: self.epoch,
        })
    }
}

fn bad_tensor(name: &str) -> Error {
    Error::Checkpoint(format!("tensor {name} has an impossible size"))
}

fn locate<'a>(
    params: &'a mut ParamStore,
    adam: Option<&'a mut AdamState>,
    name: &str,
) -> Result<(usize, &'a mut Tensor)> {
    let n = params.len();
    let unknown = || Error::Checkpoint(format!("unexpected tensor {name}"));
    for (prefix, offset) in [("adam.m.", 1), ("adam.v.", 2)] {
        if let Some(rest) = name.strip_prefix(prefix) {
            let id = params.get(rest).ok_or_else(unknown)?;
            let adam = adam.ok_or_else(unknown)?;
            let moments = if offset == 1 {
                &mut adam.m
            } else {
                &mut adam.v
            };
            return Ok((offset * n + id.index(), &mut moments[id.index()]));
        }
    }
    let id = params.get(name).ok_or_else(unknown)?;
    Ok((id.index(), params.tensor_mut(id)))
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Checkpoint("checkpoint file is truncated".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn u64(&mut self) -> Result<u64> {
        let b = self.take(8)?;
        let mut a = [0u8; 8];
        a.copy_from_slice(b);
        Ok(u64::from_le_bytes(a))
    }
}

/// Writes to a temporary sibling file and renames it into place.
pub fn save_checkpoint(ckpt: &Checkpoint, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let bytes = ckpt.to_bytes()?;
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(&bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let mut bytes = Vec::new();
    fs::File::open(path.as_ref())?.read_to_end(&mut bytes)?;
    Checkpoint::from_bytes(&bytes)
}
