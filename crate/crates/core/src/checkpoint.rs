//! `IGT1` checkpoint files.
//!
//! Layout (all integers little-endian `u32`):
//!
//! ```text
//! "IGT1" | json_len | json bytes (CheckpointMeta)
//! repeated until EOF:
//!   name_len | name bytes (UTF-8) | rank | extents[rank] | f32 payload (LE)
//! ```

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::gate::GateConfig;
use crate::model::{Model, ModelConfig};
use crate::tensor::Tensor;
use crate::train::Arm;
use crate::{Error, Result};

pub const MAGIC: &[u8; 4] = b"IGT1";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub model: ModelConfig,
    #[serde(default)]
    pub arm: Option<Arm>,
    #[serde(default)]
    pub gate: Option<GateConfig>,
    /// Stopword ids used by the idea loss.
    #[serde(default)]
    pub stopwords: Vec<u32>,
    #[serde(default)]
    pub step: usize,
}

impl CheckpointMeta {
    pub fn new(model: ModelConfig) -> Self {
        Self {
            model,
            arm: None,
            gate: None,
            stopwords: Vec::new(),
            step: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub meta: CheckpointMeta,
    pub model: Model,
}

pub fn encode(meta: &CheckpointMeta, model: &Model) -> Result<Vec<u8>> {
    let json = serde_json::to_vec(meta)?;
    let mut out = Vec::with_capacity(16 + json.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&len_u32(json.len())?.to_le_bytes());
    out.extend_from_slice(&json);
    for (name, t) in model.weights.named() {
        out.extend_from_slice(&len_u32(name.len())?.to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&len_u32(t.shape().len())?.to_le_bytes());
        for &e in t.shape() {
            out.extend_from_slice(&len_u32(e)?.to_le_bytes());
        }
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

fn len_u32(n: usize) -> Result<u32> {
    u32::try_from(n).map_err(|_| Error::Format(format!("length {n} does not fit in u32")))
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len()).ok_or_else(|| {
            Error::Format(format!("truncated checkpoint: need {n} bytes at offset {}", self.pos))
        })?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn done(&self) -> bool {
        self.pos == self.buf.len()
    }
}

pub fn decode(bytes: &[u8]) -> Result<Checkpoint> {
    let mut c = Cursor { buf: bytes, pos: 0 };
    if c.take(4)? != MAGIC {
        return Err(Error::Format("missing IGT1 magic".into()));
    }
    let json_len = c.u32()? as usize;
    let meta: CheckpointMeta = serde_json::from_slice(c.take(json_len)?)?;
    meta.model.validate()?;

    let mut tensors = BTreeMap::new();
    while !c.done() {
        let name_len = c.u32()? as usize;
        let name = std::str::from_utf8(c.take(name_len)?)
            .map_err(|e| Error::Format(format!("tensor name is not UTF-8: {e}")))?
            .to_string();
        let rank = c.u32()? as usize;
        let shape = (0..rank).map(|_| c.u32().map(|e| e as usize)).collect::<Result<Vec<_>>>()?;
        let n: usize = shape.iter().product();
        let payload = c.take(n.checked_mul(4).ok_or_else(|| Error::Format("tensor too large".into()))?)?;
        let data = payload.chunks_exact(4).map(|b| f32::from_le_bytes(b.try_into().unwrap())).collect();
        if tensors.insert(name.clone(), Tensor::new(shape, data)?).is_some() {
            return Err(Error::Format(format!("duplicate tensor '{name}'")));
        }
    }

    let mut model = Model::new(meta.model.clone(), 0)?;
    if tensors.keys().any(|k| k.starts_with("lora.")) {
        model.add_lora(0);
    }
    if tensors.keys().any(|k| k.starts_with("idea.")) {
        model.add_idea_head(0);
    }
    let mut failure = None;
    model.weights.visit_mut(&mut |name, slot| {
        if failure.is_some() {
            return;
        }
        match tensors.remove(&name) {
            Some(t) if t.shape() == slot.shape() => *slot = t,
            Some(t) => {
                failure = Some(format!("tensor '{name}' has shape {:?}, expected {:?}", t.shape(), slot.shape()))
            }
            None => failure = Some(format!("missing tensor '{name}'")),
        }
    });
    if let Some(msg) = failure {
        return Err(Error::Format(msg));
    }
    if let Some(extra) = tensors.keys().next() {
        return Err(Error::Format(format!("unexpected tensor '{extra}'")));
    }
    Ok(Checkpoint { meta, model })
}

pub fn save(path: &Path, meta: &CheckpointMeta, model: &Model) -> Result<()> {
    let bytes = encode(meta, model)?;
    let mut f = std::fs::File::create(path)?;
    f.write_all(&bytes)?;
    Ok(())
}

pub fn load(path: &Path) -> Result<Checkpoint> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .map_err(|e| Error::Config(format!("cannot open checkpoint {}: {e}", path.display())))?
        .read_to_end(&mut bytes)?;
    decode(&bytes)
}

/// SHA-256 over the names and bit patterns of every backbone and token-head
/// tensor.
pub fn frozen_hash(model: &Model) -> String {
    let mut h = Sha256::new();
    for (name, t) in model.weights.named() {
        if name.starts_with("backbone.") || name == "token_head" {
            h.update(name.as_bytes());
            for v in t.data() {
                h.update(v.to_bits().to_le_bytes());
            }
        }
    }
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}
