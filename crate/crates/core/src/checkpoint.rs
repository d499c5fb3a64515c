//! Binary checkpoint files.
//!
//! Layout: `MSN1`, u32 version, u32 length + UTF-8 JSON header, u32 tensor
//! count, then per tensor a u16 name length + UTF-8 name, u8 rank, rank × u32
//! dims and the row-major `f32` data. Every integer and float is little
//! endian.

use std::io::{Read, Write};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{Normalizer, SplitRule};
use crate::model::{ModelConfig, ModelError, ModelParams};
use crate::tensor::Tensor;
use crate::train::TrainConfig;

pub const MAGIC: &[u8; 4] = b"MSN1";
pub const VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("not a checkpoint: bad magic {0:?}")]
    Magic([u8; 4]),
    #[error("unsupported checkpoint version {0}")]
    Version(u32),
    #[error("checkpoint truncated while reading {0}")]
    Truncated(String),
    #[error("checkpoint has {0} trailing bytes")]
    Trailing(usize),
    #[error("checkpoint header: {0}")]
    Header(String),
    #[error("tensor {name:?}: {msg}")]
    Tensor { name: String, msg: String },
    #[error("checkpoint does not match the expected model: {0}")]
    Mismatch(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Training metadata stored next to the weights.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub step: usize,
    pub seed: u64,
    /// Best validation loss, when training produced one.
    pub metric: Option<f64>,
    /// Vocabulary words by id, so a checkpoint can be applied to new text.
    pub vocab: Vec<String>,
    pub normalizer: Option<Normalizer>,
    /// Split used in training, so evaluation can select the same days.
    #[serde(default)]
    pub split: Option<SplitRule>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    model: ModelConfig,
    train: TrainConfig,
    meta: CheckpointMeta,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub params: ModelParams,
    pub train: TrainConfig,
    pub meta: CheckpointMeta,
}

impl Checkpoint {
    pub fn write(&self, mut out: impl Write) -> Result<(), CheckpointError> {
        let tensors = self.params.tensors();
        for (i, t) in tensors.iter().enumerate() {
            let name = t.name().unwrap_or("");
            if name.is_empty() || tensors[..i].iter().any(|u| u.name() == Some(name)) {
                return Err(CheckpointError::Tensor {
                    name: name.into(),
                    msg: "names must be non-empty and unique".into(),
                });
            }
        }
        let header = Header {
            model: self.params.config().clone(),
            train: self.train.clone(),
            meta: self.meta.clone(),
        };
        let json = serde_json::to_vec(&header).map_err(|e| CheckpointError::Header(e.to_string()))?;
        let mut buf = Vec::with_capacity(64 + json.len() + 4 * self.params.num_scalars());
        buf.extend_from_slice(MAGIC);
        buf.extend_from_slice(&VERSION.to_le_bytes());
        buf.extend_from_slice(&len_u32(json.len(), "header")?.to_le_bytes());
        buf.extend_from_slice(&json);
        buf.extend_from_slice(&len_u32(tensors.len(), "tensor count")?.to_le_bytes());
        for t in tensors {
            let name = t.name().unwrap_or("");
            let too_long = || CheckpointError::Tensor {
                name: name.into(),
                msg: "name or rank too long".into(),
            };
            buf.extend_from_slice(&u16::try_from(name.len()).map_err(|_| too_long())?.to_le_bytes());
            buf.extend_from_slice(name.as_bytes());
            buf.push(u8::try_from(t.shape().len()).map_err(|_| too_long())?);
            for &d in t.shape() {
                buf.extend_from_slice(&len_u32(d, name)?.to_le_bytes());
            }
            for &x in t.data() {
                buf.extend_from_slice(&x.to_le_bytes());
            }
        }
        out.write_all(&buf)?;
        Ok(())
    }

    /// Parses and validates against the model config stored in the file.
    pub fn read(mut input: impl Read) -> Result<Self, CheckpointError> {
        let mut bytes = Vec::new();
        input.read_to_end(&mut bytes)?;
        let mut r = Cursor { bytes: &bytes, pos: 0 };
        let magic: [u8; 4] = r.take(4, "magic")?.try_into().expect("4 bytes");
        if &magic != MAGIC {
            return Err(CheckpointError::Magic(magic));
        }
        let version = r.u32("version")?;
        if version != VERSION {
            return Err(CheckpointError::Version(version));
        }
        let len = r.u32("header length")? as usize;
        let header: Header =
            serde_json::from_slice(r.take(len, "header")?).map_err(|e| CheckpointError::Header(e.to_string()))?;
        let count = r.u32("tensor count")? as usize;
        let mut tensors = Vec::with_capacity(count.min(1024));
        for k in 0..count {
            let what = format!("tensor {k}");
            let name_len = u16::from_le_bytes(r.take(2, &what)?.try_into().expect("2 bytes")) as usize;
            let name = std::str::from_utf8(r.take(name_len, &what)?)
                .map_err(|_| CheckpointError::Tensor {
                    name: format!("#{k}"),
                    msg: "name is not UTF-8".into(),
                })?
                .to_owned();
            let rank = r.take(1, &name)?[0] as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(r.u32(&name)? as usize);
            }
            let numel = shape
                .iter()
                .try_fold(1usize, |a, &d| a.checked_mul(d))
                .and_then(|n| n.checked_mul(4))
                .ok_or_else(|| CheckpointError::Tensor {
                    name: name.clone(),
                    msg: format!("shape {shape:?} overflows"),
                })?;
            let data = r
                .take(numel, &name)?
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect();
            let t = Tensor::new(shape, data).map_err(|e| CheckpointError::Tensor {
                name: name.clone(),
                msg: e.to_string(),
            })?;
            tensors.push(t.with_name(name));
        }
        if r.pos != bytes.len() {
            return Err(CheckpointError::Trailing(bytes.len() - r.pos));
        }
        let params = ModelParams::from_tensors(&header.model, tensors)?;
        Ok(Self {
            params,
            train: header.train,
            meta: header.meta,
        })
    }

    /// Like [`Self::read`], additionally requiring the stored model to equal
    /// `expected`.
    pub fn read_expecting(input: impl Read, expected: &ModelConfig) -> Result<Self, CheckpointError> {
        let ck = Self::read(input)?;
        if ck.params.config() != expected {
            // name the first tensor that differs, if any
            let theirs = crate::model::layout(ck.params.config());
            let ours = crate::model::layout(expected);
            let detail = ours
                .iter()
                .find(|s| !theirs.iter().any(|t| t.name == s.name && t.shape == s.shape))
                .map(|s| format!("tensor {:?} expected with shape {:?}", s.name, s.shape))
                .unwrap_or_else(|| "configuration differs".into());
            return Err(CheckpointError::Mismatch(detail));
        }
        Ok(ck)
    }

    pub fn save(&self, path: &std::path::Path) -> Result<(), CheckpointError> {
        let mut buf = Vec::new();
        self.write(&mut buf)?;
        std::fs::write(path, buf)?;
        Ok(())
    }

    pub fn load(path: &std::path::Path) -> Result<Self, CheckpointError> {
        Self::read(std::fs::File::open(path)?)
    }
}

fn len_u32(n: usize, what: &str) -> Result<u32, CheckpointError> {
    u32::try_from(n).map_err(|_| CheckpointError::Tensor {
        name: what.into(),
        msg: format!("{n} exceeds u32"),
    })
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8], CheckpointError> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| CheckpointError::Truncated(what.into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }
}
