//! Binary checkpoint files.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "GFTC"                      4 bytes magic
//! version                     u32
//! header length               u64
//! header                      UTF-8 JSON
//! repeated until end of file:
//!     name length             u32
//!     name                    UTF-8
//!     rank                    u32
//!     dims                    u64 × rank
//!     payload                 f32 × product(dims)
//! ```
//!
//! Values are stored as `f32`; loading widens them back to `f64`, so a
//! save → load → save cycle reproduces the file byte for byte.

use std::fs;
use std::path::Path;

use crate::error::{CheckpointError, Error, Result};
use crate::tensor::{Parameterized, Tensor};

use super::{ModelConfig, TransformerModel};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"GFTC";
pub const CHECKPOINT_VERSION: u32 = 1;

/// A header plus named tensors, independent of what they describe.
#[derive(Clone, Debug, PartialEq)]
pub struct TensorFile {
    pub header: String,
    pub tensors: Vec<(String, Tensor)>,
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, context: &str) -> Result<&'a [u8], CheckpointError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let Some(end) = end else {
            return Err(CheckpointError::Truncated {
                context: context.to_string(),
            });
        };
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u32(&mut self, context: &str) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4, context)?.try_into().unwrap()))
    }

    fn u64(&mut self, context: &str) -> Result<u64, CheckpointError> {
        Ok(u64::from_le_bytes(self.take(8, context)?.try_into().unwrap()))
    }

    fn len(&mut self, context: &str) -> Result<usize, CheckpointError> {
        let v = self.u64(context)?;
        usize::try_from(v).map_err(|_| CheckpointError::Truncated {
            context: context.to_string(),
        })
    }

    fn at_end(&self) -> bool {
        self.pos == self.bytes.len()
    }
}

impl TensorFile {
    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.header.len() as u64).to_le_bytes());
        out.extend_from_slice(self.header.as_bytes());
        for (name, t) in &self.tensors {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for &v in t.data() {
                out.extend_from_slice(&(v as f32).to_le_bytes());
            }
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, CheckpointError> {
        let mut r = Reader { bytes, pos: 0 };
        if bytes.len() < 4 || r.take(4, "magic")? != CHECKPOINT_MAGIC {
            return Err(CheckpointError::BadMagic);
        }
        let version = r.u32("version")?;
        if version != CHECKPOINT_VERSION {
            return Err(CheckpointError::VersionMismatch {
                found: version,
                expected: CHECKPOINT_VERSION,
            });
        }
        let header_len = r.len("header length")?;
        let header = std::str::from_utf8(r.take(header_len, "header")?)
            .map_err(|e| CheckpointError::Config(e.to_string()))?
            .to_string();

        let mut tensors = Vec::new();
        while !r.at_end() {
            let name_len = r.u32("tensor name length")? as usize;
            let name = std::str::from_utf8(r.take(name_len, "tensor name")?)
                .map_err(|e| CheckpointError::Config(format!("tensor name: {e}")))?
                .to_string();
            let ctx = |what: &str| format!("{what} of `{name}`");
            let rank = r.u32(&ctx("rank"))? as usize;
            let mut shape = Vec::with_capacity(rank.min(8));
            for _ in 0..rank {
                shape.push(r.len(&ctx("dims"))?);
            }
            let numel = shape
                .iter()
                .try_fold(1usize, |acc, &d| acc.checked_mul(d))
                .and_then(|n| n.checked_mul(4).map(|_| n))
                .ok_or_else(|| CheckpointError::Truncated {
                    context: ctx("payload"),
                })?;
            let payload = r.take(numel * 4, &ctx("payload"))?;
            let data: Vec<f64> = payload
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
                .collect();
            if data.iter().any(|v| !v.is_finite()) {
                return Err(CheckpointError::NonFinite(name));
            }
            let tensor = Tensor::new(shape.clone(), data).map_err(|_| CheckpointError::ShapeMismatch {
                name: name.clone(),
                expected: Vec::new(),
                found: shape,
            })?;
            tensors.push((name, tensor));
        }
        Ok(Self { header, tensors })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, self.encode()).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Ok(Self::decode(&bytes)?)
    }
}

/// Serializes a model: its configuration as the header, then every parameter
/// in enumeration order.
pub fn encode_model(model: &TransformerModel) -> Result<Vec<u8>> {
    let file = TensorFile {
        header: serde_json::to_string(model.config())?,
        tensors: model
            .named_params()
            .into_iter()
            .map(|(n, p)| (n, p.value.clone()))
            .collect(),
    };
    Ok(file.encode())
}

/// Rebuilds a model from [`encode_model`] output. The embedded configuration
/// is revalidated and every stored tensor must match the architecture it
/// describes, by name, order and shape.
pub fn decode_model(bytes: &[u8]) -> Result<TransformerModel> {
    let file = TensorFile::decode(bytes)?;
    let config: ModelConfig = serde_json::from_str(&file.header).map_err(|e| CheckpointError::Config(e.to_string()))?;
    config.validate().map_err(|e| CheckpointError::Config(e.to_string()))?;
    let mut model = TransformerModel::new(config)?;
    let mut stored = file.tensors.into_iter();
    for (name, param) in model.named_params_mut() {
        let (found_name, tensor) = stored
            .next()
            .ok_or_else(|| CheckpointError::MissingTensor(name.clone()))?;
        if found_name != name {
            return Err(CheckpointError::UnexpectedTensor {
                expected: name,
                found: found_name,
            }
            .into());
        }
        if tensor.shape() != param.value.shape() {
            return Err(CheckpointError::ShapeMismatch {
                name,
                expected: param.value.shape().to_vec(),
                found: tensor.shape().to_vec(),
            }
            .into());
        }
        param.value = tensor;
    }
    if let Some((extra, _)) = stored.next() {
        return Err(CheckpointError::UnexpectedTensor {
            expected: "<end of file>".into(),
            found: extra,
        }
        .into());
    }
    Ok(model)
}

pub fn save_checkpoint(model: &TransformerModel, path: &Path) -> Result<()> {
    fs::write(path, encode_model(model)?).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<TransformerModel> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_model(&bytes)
}
