//! Binary parameter checkpoints.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic      8 bytes  "SPNCKPT\0"
//! version    u32
//! meta_len   u32
//! meta       meta_len bytes of JSON: {"spec": ModelSpec, "bn_epsilon", "bn_momentum"}
//! count      u32
//! count × {
//!   name_len u16, name (UTF-8)
//!   rank     u8,  rank × u32 dims
//!   values   product(dims) × f32
//! }
//! ```

use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use super::{build_model, ModelParams, ModelSpec};
use crate::tensor::{Real, Tensor};
use crate::Error;

pub const CHECKPOINT_MAGIC: [u8; 8] = *b"SPNCKPT\0";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Meta {
    spec: ModelSpec,
    bn_epsilon: f64,
    bn_momentum: f64,
}

/// A model spec with its parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub spec: ModelSpec,
    pub params: ModelParams<f32>,
}

pub fn write_checkpoint<T: Real>(mut out: impl Write, spec: &ModelSpec, params: &ModelParams<T>) -> Result<(), Error> {
    let norm = params.point.first().map(|l| &l.norm);
    let meta = Meta {
        spec: spec.clone(),
        bn_epsilon: norm.map_or(crate::tensor::BN_EPSILON, |n| n.epsilon),
        bn_momentum: norm.map_or(crate::tensor::BN_MOMENTUM, |n| n.momentum),
    };
    let meta = serde_json::to_vec(&meta).map_err(|e| Error::Checkpoint(e.to_string()))?;
    let mut buf = Vec::new();
    buf.extend_from_slice(&CHECKPOINT_MAGIC);
    buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    buf.extend_from_slice(&(meta.len() as u32).to_le_bytes());
    buf.extend_from_slice(&meta);
    let tensors = params.named_tensors();
    buf.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for (name, tensor) in tensors {
        buf.extend_from_slice(&(name.len() as u16).to_le_bytes());
        buf.extend_from_slice(name.as_bytes());
        buf.push(tensor.shape().len() as u8);
        for &d in tensor.shape() {
            buf.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for v in tensor.data() {
            let v = v.to_f32().expect("finite parameter");
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    out.write_all(&buf).map_err(|e| Error::io("writing checkpoint", e))
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], Error> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Checkpoint(format!("truncated at byte {}", self.pos)))?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32, Error> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u16(&mut self) -> Result<u16, Error> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().expect("2 bytes")))
    }
}

pub fn read_checkpoint(mut input: impl Read) -> Result<Checkpoint, Error> {
    let mut bytes = Vec::new();
    input
        .read_to_end(&mut bytes)
        .map_err(|e| Error::io("reading checkpoint", e))?;
    let mut cur = Cursor { bytes: &bytes, pos: 0 };
    if cur.take(8)? != CHECKPOINT_MAGIC {
        return Err(Error::Checkpoint("bad magic".into()));
    }
    let version = cur.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported version {version}, expected {CHECKPOINT_VERSION}"
        )));
    }
    let meta_len = cur.u32()? as usize;
    let meta: Meta = serde_json::from_slice(cur.take(meta_len)?).map_err(|e| Error::Checkpoint(e.to_string()))?;
    let spec = meta.spec;
    spec.validate()?;

    let mut params: ModelParams<f32> = build_model(&spec, 0)?;
    for layer in params.hidden_mut() {
        layer.norm.epsilon = meta.bn_epsilon;
        layer.norm.momentum = meta.bn_momentum;
    }
    let count = cur.u32()? as usize;
    let mut slots = params.named_tensors_mut();
    if count != slots.len() {
        return Err(Error::Checkpoint(format!("{count} tensors, spec needs {}", slots.len())));
    }
    for (expected_name, slot) in slots.iter_mut() {
        let name_len = cur.u16()? as usize;
        let name = std::str::from_utf8(cur.take(name_len)?).map_err(|e| Error::Checkpoint(e.to_string()))?;
        if name != expected_name {
            return Err(Error::Checkpoint(format!("expected tensor {expected_name}, found {name}")));
        }
        let rank = cur.take(1)?[0] as usize;
        let dims = (0..rank).map(|_| cur.u32().map(|d| d as usize)).collect::<Result<Vec<_>, _>>()?;
        if dims != slot.shape() {
            return Err(Error::Checkpoint(format!(
                "tensor {name} has shape {dims:?}, spec needs {:?}",
                slot.shape()
            )));
        }
        let len: usize = dims.iter().product();
        let raw = cur.take(len * 4)?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        **slot = Tensor::new(&dims, data)?;
    }
    drop(slots);
    if cur.pos != bytes.len() {
        return Err(Error::Checkpoint(format!("{} trailing bytes", bytes.len() - cur.pos)));
    }
    Ok(Checkpoint { spec, params })
}
