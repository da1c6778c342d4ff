//! SRGW checkpoint container.
//!
//! Layout (little-endian): `"SRGW"`, version `u16`, tensor count `u32`, then per
//! tensor a `u16` name length, the UTF-8 name, dtype `u8` (0 = f32), rank `u8`, the
//! dims as `u32`, and the raw f32 data. A CRC32 of everything before it ends the
//! file.
//!
//! Models are stored as `layers.{i}.{weight,bias,running_mean,running_var}` tensors
//! plus one empty tensor whose name `meta.model=<json>` carries the architecture and
//! training metadata.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layers::LayerKind;
use crate::model::{LayerParams, Model, ModelMeta};
use crate::tensor::Tensor;

const MAGIC: &[u8; 4] = b"SRGW";
const VERSION: u16 = 1;
const DTYPE_F32: u8 = 0;
const META_PREFIX: &str = "meta.model=";

/// A named tensor; an empty `dims` with no data is allowed as a pure name record.
#[derive(Debug, Clone, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub dims: Vec<usize>,
    pub data: Vec<f32>,
}

pub fn encode_tensors(tensors: &[NamedTensor]) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    let count = u32::try_from(tensors.len()).map_err(|_| Error::Format("too many tensors".into()))?;
    out.extend_from_slice(&count.to_le_bytes());
    for t in tensors {
        let name = t.name.as_bytes();
        let len = u16::try_from(name.len()).map_err(|_| Error::Format(format!("tensor name too long: {}", t.name)))?;
        let rank = u8::try_from(t.dims.len()).map_err(|_| Error::Format("rank exceeds 255".into()))?;
        if t.dims.iter().product::<usize>() != t.data.len() {
            return Err(Error::Format(format!("tensor {} data does not match its dims", t.name)));
        }
        out.extend_from_slice(&len.to_le_bytes());
        out.extend_from_slice(name);
        out.push(DTYPE_F32);
        out.push(rank);
        for &d in &t.dims {
            let d = u32::try_from(d).map_err(|_| Error::Format("dimension exceeds u32".into()))?;
            out.extend_from_slice(&d.to_le_bytes());
        }
        for v in &t.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    let crc = crc32fast::hash(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    Ok(out)
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Format(format!("unexpected end of checkpoint at byte {}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

pub fn decode_tensors(bytes: &[u8]) -> Result<Vec<NamedTensor>> {
    if bytes.len() < 4 || &bytes[..4] != MAGIC {
        return Err(Error::Format("bad magic: not an SRGW checkpoint".into()));
    }
    if bytes.len() < 14 {
        return Err(Error::Format(format!("checkpoint truncated: {} bytes", bytes.len())));
    }
    let (body, tail) = bytes.split_at(bytes.len() - 4);
    let stored = u32::from_le_bytes(tail.try_into().unwrap());
    let actual = crc32fast::hash(body);
    if stored != actual {
        return Err(Error::Format(format!(
            "CRC mismatch: stored {stored:08x}, computed {actual:08x} (file truncated or corrupted)"
        )));
    }
    let mut c = Cursor { bytes: body, pos: 4 };
    let version = c.u16()?;
    if version != VERSION {
        return Err(Error::Format(format!("unsupported checkpoint version {version}")));
    }
    let count = c.u32()? as usize;
    let mut tensors = Vec::with_capacity(count.min(1 << 16));
    for _ in 0..count {
        let len = c.u16()? as usize;
        let name = std::str::from_utf8(c.take(len)?)
            .map_err(|_| Error::Format("tensor name is not UTF-8".into()))?
            .to_string();
        let dtype = c.u8()?;
        if dtype != DTYPE_F32 {
            return Err(Error::Format(format!("tensor {name}: unsupported dtype {dtype}")));
        }
        let rank = c.u8()? as usize;
        let dims = (0..rank).map(|_| c.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let n = dims
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .ok_or_else(|| Error::Format(format!("tensor {name}: size overflow")))?;
        let raw = c.take(n.checked_mul(4).ok_or_else(|| Error::Format("size overflow".into()))?)?;
        let data = raw.chunks_exact(4).map(|b| f32::from_le_bytes(b.try_into().unwrap())).collect();
        tensors.push(NamedTensor { name, dims, data });
    }
    if c.pos != body.len() {
        return Err(Error::Format(format!("{} trailing bytes after the last tensor", body.len() - c.pos)));
    }
    Ok(tensors)
}

#[derive(Serialize, Deserialize)]
struct ModelHeader {
    input_shape: Vec<usize>,
    layers: Vec<LayerKind>,
    meta: ModelMeta,
}

fn param_slots(p: &LayerParams<f32>) -> [(&'static str, Option<&Tensor<f32>>); 4] {
    [
        ("weight", p.weight.as_ref()),
        ("bias", p.bias.as_ref()),
        ("running_mean", p.running_mean.as_ref()),
        ("running_var", p.running_var.as_ref()),
    ]
}

pub fn encode_model(model: &Model<f32>) -> Result<Vec<u8>> {
    let header = ModelHeader {
        input_shape: model.input_shape().to_vec(),
        layers: model.layers().iter().map(|l| l.kind.clone()).collect(),
        meta: model.meta.clone(),
    };
    let json = serde_json::to_string(&header).map_err(|e| Error::Format(e.to_string()))?;
    let mut tensors = vec![NamedTensor {
        name: format!("{META_PREFIX}{json}"),
        dims: vec![0],
        data: Vec::new(),
    }];
    for (i, p) in model.params().iter().enumerate() {
        for (slot, t) in param_slots(p) {
            if let Some(t) = t {
                tensors.push(NamedTensor {
                    name: format!("layers.{i}.{slot}"),
                    dims: t.shape().to_vec(),
                    data: t.data().to_vec(),
                });
            }
        }
    }
    encode_tensors(&tensors)
}

/// Rebuild a model (in eval BN mode) from its checkpoint bytes.
pub fn decode_model(bytes: &[u8]) -> Result<Model<f32>> {
    let tensors = decode_tensors(bytes)?;
    let header = tensors
        .iter()
        .find_map(|t| t.name.strip_prefix(META_PREFIX))
        .ok_or_else(|| Error::Format("checkpoint lacks model metadata".into()))?;
    let header: ModelHeader = serde_json::from_str(header).map_err(|e| Error::Format(format!("model metadata: {e}")))?;
    let mut model = Model::new(header.input_shape, header.layers).map_err(|e| Error::Format(e.to_string()))?;
    model.meta = header.meta;
    let mut seen = 0;
    for t in tensors.iter().filter(|t| !t.name.starts_with(META_PREFIX)) {
        let unknown = || Error::Format(format!("unexpected tensor {}", t.name));
        let rest = t.name.strip_prefix("layers.").ok_or_else(unknown)?;
        let (idx, slot) = rest.split_once('.').ok_or_else(unknown)?;
        let idx: usize = idx.parse().map_err(|_| unknown())?;
        let p = model.params_mut().get_mut(idx).ok_or_else(unknown)?;
        let target = match slot {
            "weight" => p.weight.as_mut(),
            "bias" => p.bias.as_mut(),
            "running_mean" => p.running_mean.as_mut(),
            "running_var" => p.running_var.as_mut(),
            _ => None,
        }
        .ok_or_else(unknown)?;
        if target.shape() != t.dims.as_slice() {
            return Err(Error::Format(format!(
                "tensor {} has shape {:?}, the architecture expects {:?}",
                t.name,
                t.dims,
                target.shape()
            )));
        }
        target.data_mut().copy_from_slice(&t.data);
        seen += 1;
    }
    let expected: usize = model.params().iter().map(|p| param_slots(p).iter().filter(|s| s.1.is_some()).count()).sum();
    if seen != expected {
        return Err(Error::Format(format!("checkpoint holds {seen} parameter tensors, expected {expected}")));
    }
    Ok(model)
}

pub fn save_checkpoint(model: &Model<f32>, path: &Path) -> Result<()> {
    let bytes = encode_model(model)?;
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, bytes)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Model<f32>> {
    decode_model(&fs::read(path)?)
}
