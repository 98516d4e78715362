//! Binary checkpoint format.
//!
//! ```text
//! "WSEG" | u32 version | u32 len, config text | u32 count |
//!   count × (u32 len, name | u32 rank | rank × u32 dim | f32 data)
//! ```
//!
//! All integers and floats are little-endian. The config text holds one
//! `model.<key>=<value>` line per [`ModelConfig`] field plus `meta.epoch`
//! and `meta.best_val_dice`. Batch-norm running statistics are stored as
//! the tensors `<layer>.bn.running_mean` and `<layer>.bn.running_var`.

use std::path::Path;

use super::config::ModelConfig;
use super::network::Model;
use crate::tensor::Tensor;
use crate::{Error, Result};

pub const MAGIC: [u8; 4] = *b"WSEG";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum CheckpointError {
    #[error("bad magic bytes {found:?}, expected \"WSEG\"")]
    BadMagic { found: Vec<u8> },

    #[error("unsupported checkpoint version {0}, this build reads version {VERSION}")]
    UnsupportedVersion(u32),

    #[error("checkpoint truncated at byte {offset}: needed {needed} more bytes")]
    Truncated { offset: usize, needed: usize },

    #[error("malformed checkpoint: {0}")]
    Malformed(String),

    #[error("config mismatch on {key}: checkpoint has {found}, requested {expected}")]
    ConfigMismatch {
        key: String,
        expected: String,
        found: String,
    },

    #[error("checkpoint lacks tensor {0}")]
    MissingTensor(String),

    #[error("checkpoint has unknown tensor {0}")]
    UnknownTensor(String),

    #[error("tensor {name} has shape {found:?}, model expects {expected:?}")]
    ShapeMismatch {
        name: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },
}

/// A serialized model: config snapshot, training metadata and every named
/// tensor in model order.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub epoch: u64,
    pub best_val_dice: f64,
    pub tensors: Vec<(String, Tensor)>,
}

fn named_tensors(model: &Model) -> Vec<(String, Tensor)> {
    let store = model.store();
    let mut out: Vec<(String, Tensor)> = store
        .params()
        .iter()
        .map(|p| (p.name.clone(), p.value.clone()))
        .collect();
    for n in store.norms() {
        out.push((format!("{}.running_mean", n.name), n.buffers.running_mean.clone()));
        out.push((format!("{}.running_var", n.name), n.buffers.running_var.clone()));
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], CheckpointError> {
        let left = self.bytes.len() - self.pos;
        if n > left {
            return Err(CheckpointError::Truncated {
                offset: self.bytes.len(),
                needed: n - left,
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn text(&mut self) -> Result<&'a str, CheckpointError> {
        let n = self.u32()? as usize;
        let at = self.pos;
        std::str::from_utf8(self.take(n)?)
            .map_err(|_| CheckpointError::Malformed(format!("invalid UTF-8 in string at byte {at}")))
    }
}

fn put_u32(out: &mut Vec<u8>, v: usize) {
    out.extend_from_slice(&(v as u32).to_le_bytes());
}

impl Checkpoint {
    pub fn from_model(model: &Model, epoch: u64, best_val_dice: f64) -> Self {
        Checkpoint {
            config: model.config().clone(),
            epoch,
            best_val_dice,
            tensors: named_tensors(model),
        }
    }

    fn config_text(&self) -> String {
        let mut s = String::new();
        for (k, v) in self.config.to_pairs() {
            s.push_str(&format!("model.{k}={v}\n"));
        }
        s.push_str(&format!("meta.epoch={}\n", self.epoch));
        s.push_str(&format!("meta.best_val_dice={}\n", self.best_val_dice));
        s
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = MAGIC.to_vec();
        out.extend_from_slice(&VERSION.to_le_bytes());
        let text = self.config_text();
        put_u32(&mut out, text.len());
        out.extend_from_slice(text.as_bytes());
        put_u32(&mut out, self.tensors.len());
        for (name, t) in &self.tensors {
            put_u32(&mut out, name.len());
            out.extend_from_slice(name.as_bytes());
            put_u32(&mut out, t.rank());
            for &d in t.shape() {
                put_u32(&mut out, d);
            }
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, CheckpointError> {
        let mut r = Reader { bytes, pos: 0 };
        let magic = r.take(4).map_err(|_| CheckpointError::BadMagic {
            found: bytes[..bytes.len().min(4)].to_vec(),
        })?;
        if magic != MAGIC {
            return Err(CheckpointError::BadMagic { found: magic.to_vec() });
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(CheckpointError::UnsupportedVersion(version));
        }
        let (config, epoch, best_val_dice) = parse_config_text(r.text()?)?;
        let count = r.u32()? as usize;
        let mut tensors = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            let name = r.text()?.to_string();
            let rank = r.u32()? as usize;
            if rank > 8 {
                return Err(CheckpointError::Malformed(format!("tensor {name} has rank {rank}")));
            }
            let shape = (0..rank)
                .map(|_| r.u32().map(|d| d as usize))
                .collect::<Result<Vec<_>, _>>()?;
            let len = shape
                .iter()
                .try_fold(1usize, |a, &d| a.checked_mul(d))
                .and_then(|n| n.checked_mul(4))
                .ok_or_else(|| CheckpointError::Malformed(format!("tensor {name} is too large")))?;
            let data = r
                .take(len)?
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect();
            let t = Tensor::new(&shape, data).map_err(|e| CheckpointError::Malformed(e.to_string()))?;
            tensors.push((name, t));
        }
        if r.pos != bytes.len() {
            return Err(CheckpointError::Malformed(format!(
                "{} trailing bytes after the last tensor",
                bytes.len() - r.pos
            )));
        }
        Ok(Checkpoint {
            config,
            epoch,
            best_val_dice,
            tensors,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Ok(Checkpoint::from_bytes(&bytes)?)
    }

    /// Fails with [`CheckpointError::ConfigMismatch`] on the first field
    /// where the stored config differs from `expected`.
    pub fn check_config(&self, expected: &ModelConfig) -> Result<(), CheckpointError> {
        match expected.first_difference(&self.config) {
            Some((key, expected, found)) => Err(CheckpointError::ConfigMismatch { key, expected, found }),
            None => Ok(()),
        }
    }

    /// Rebuilds the model. Every model tensor must be present with its exact
    /// shape and no extra tensors are allowed.
    pub fn to_model(&self) -> Result<Model> {
        let mut model = Model::build(&self.config, 0)?;
        let mut by_name: std::collections::HashMap<&str, &Tensor> = std::collections::HashMap::new();
        for (name, t) in &self.tensors {
            if by_name.insert(name.as_str(), t).is_some() {
                return Err(CheckpointError::Malformed(format!("tensor {name} appears twice")).into());
            }
        }
        let mut fetch = |name: String, into: &mut Tensor| -> Result<(), CheckpointError> {
            let t = by_name
                .remove(name.as_str())
                .ok_or_else(|| CheckpointError::MissingTensor(name.clone()))?;
            if t.shape() != into.shape() {
                return Err(CheckpointError::ShapeMismatch {
                    name,
                    expected: into.shape().to_vec(),
                    found: t.shape().to_vec(),
                });
            }
            *into = t.clone();
            Ok(())
        };
        let store = model.store_mut();
        for p in store.params_mut() {
            fetch(p.name.clone(), &mut p.value)?;
        }
        for n in store.norms_mut() {
            fetch(format!("{}.running_mean", n.name), &mut n.buffers.running_mean)?;
            fetch(format!("{}.running_var", n.name), &mut n.buffers.running_var)?;
        }
        if let Some(name) = by_name.keys().min() {
            return Err(CheckpointError::UnknownTensor(name.to_string()).into());
        }
        Ok(model)
    }
}

fn parse_config_text(text: &str) -> Result<(ModelConfig, u64, f64), CheckpointError> {
    let mut pairs = Vec::new();
    let (mut epoch, mut dice) = (None, None);
    for line in text.lines().filter(|l| !l.trim().is_empty()) {
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| CheckpointError::Malformed(format!("config line '{line}' has no '='")))?;
        let bad = || CheckpointError::Malformed(format!("bad value in config line '{line}'"));
        if let Some(key) = k.strip_prefix("model.") {
            pairs.push((key, v));
        } else if k == "meta.epoch" {
            epoch = Some(v.parse().map_err(|_| bad())?);
        } else if k == "meta.best_val_dice" {
            dice = Some(v.parse().map_err(|_| bad())?);
        } else {
            return Err(CheckpointError::Malformed(format!("unknown config key '{k}'")));
        }
    }
    let config = ModelConfig::from_pairs(pairs).map_err(|e| CheckpointError::Malformed(e.to_string()))?;
    let missing = |k: &str| CheckpointError::Malformed(format!("config block lacks {k}"));
    Ok((
        config,
        epoch.ok_or_else(|| missing("meta.epoch"))?,
        dice.ok_or_else(|| missing("meta.best_val_dice"))?,
    ))
}

/// Loads a model from `path`. With `expected` set, the stored config must
/// match it exactly.
pub fn load_checkpoint(path: impl AsRef<Path>, expected: Option<&ModelConfig>) -> Result<(Model, Checkpoint)> {
    let ck = Checkpoint::load(path)?;
    if let Some(cfg) = expected {
        ck.check_config(cfg)?;
    }
    Ok((ck.to_model()?, ck))
}
