//! Binary checkpoint container shared by base models and adapters.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic    8 bytes  "TGCKPT\0\0"
//! version  u32
//! header   u64 length + UTF-8 JSON (kind, model config, free-form meta)
//! count    u32
//! tensor*  u32 name length + UTF-8 name, u32 rank, u64 dims[rank],
//!          f64 data[prod(dims)] in row-major order
//! ```

use std::path::Path;

use serde::{Deserialize, Serialize};
use trustgossip_core::model::{BaseParams, LoraAdapterSet, LoraParams, ModelConfig, TinyLM};

use crate::error::{AppError, Result};

pub const MAGIC: [u8; 8] = *b"TGCKPT\0\0";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CheckpointKind {
    Base,
    Adapters,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub kind: CheckpointKind,
    pub model: ModelConfig,
    #[serde(default)]
    pub meta: serde_json::Value,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

pub fn encode(header: &CheckpointHeader, tensors: &[(String, Vec<usize>, &[f64])]) -> Vec<u8> {
    let json = serde_json::to_vec(header).expect("header serialises");
    let mut out = Vec::new();
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for (name, shape, data) in tensors {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(shape.len() as u32).to_le_bytes());
        for d in shape {
            out.extend_from_slice(&(*d as u64).to_le_bytes());
        }
        for x in data.iter() {
            out.extend_from_slice(&x.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> std::result::Result<&'a [u8], String> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| {
            format!("truncated at byte {} (wanted {n} more)", self.pos)
        })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> std::result::Result<u32, String> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> std::result::Result<u64, String> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn len(&mut self) -> std::result::Result<usize, String> {
        usize::try_from(self.u64()?).map_err(|_| "length overflows".to_string())
    }
}

pub fn decode(bytes: &[u8]) -> std::result::Result<(CheckpointHeader, Vec<Tensor>), String> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(8)? != MAGIC {
        return Err("not a checkpoint (bad magic)".into());
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(format!("unsupported checkpoint version {version}"));
    }
    let json_len = r.len()?;
    let header: CheckpointHeader =
        serde_json::from_slice(r.take(json_len)?).map_err(|e| format!("header: {e}"))?;
    let count = r.u32()? as usize;
    let mut tensors = Vec::with_capacity(count.min(1024));
    for _ in 0..count {
        let name_len = r.u32()? as usize;
        let name = String::from_utf8(r.take(name_len)?.to_vec()).map_err(|_| "tensor name is not UTF-8".to_string())?;
        let rank = r.u32()? as usize;
        let mut shape = Vec::with_capacity(rank.min(8));
        for _ in 0..rank {
            shape.push(r.len()?);
        }
        let n = shape
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .ok_or_else(|| format!("tensor {name} is too large"))?;
        let raw = r.take(n.checked_mul(8).ok_or_else(|| format!("tensor {name} is too large"))?)?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        tensors.push(Tensor { name, shape, data });
    }
    if r.pos != bytes.len() {
        return Err(format!("{} trailing bytes", bytes.len() - r.pos));
    }
    Ok((header, tensors))
}

fn read(path: &Path, kind: CheckpointKind) -> Result<(CheckpointHeader, Vec<(String, Vec<usize>, Vec<f64>)>)> {
    let bytes = std::fs::read(path).map_err(|e| AppError::io(path, e))?;
    let (header, tensors) = decode(&bytes).map_err(|m| AppError::format(path, m))?;
    if header.kind != kind {
        return Err(AppError::format(path, format!("expected a {kind:?} checkpoint, found {:?}", header.kind)));
    }
    Ok((header, tensors.into_iter().map(|t| (t.name, t.shape, t.data)).collect()))
}

fn write(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(|e| AppError::io(parent, e))?;
    }
    std::fs::write(path, bytes).map_err(|e| AppError::io(path, e))
}

pub fn save_base(path: &Path, model: &TinyLM, meta: serde_json::Value) -> Result<()> {
    let header = CheckpointHeader {
        kind: CheckpointKind::Base,
        model: model.config().clone(),
        meta,
    };
    let named: Vec<(String, Vec<usize>, &[f64])> = model
        .params()
        .named()
        .into_iter()
        .map(|t| (t.name, t.shape, t.data))
        .collect();
    write(path, &encode(&header, &named))
}

pub fn load_base(path: &Path) -> Result<(CheckpointHeader, TinyLM)> {
    let (header, tensors) = read(path, CheckpointKind::Base)?;
    let params = BaseParams::from_named(&header.model, &tensors)?;
    let model = TinyLM::new(header.model.clone(), params)?;
    Ok((header, model))
}

pub fn save_adapters(path: &Path, config: &ModelConfig, adapters: &LoraAdapterSet, meta: serde_json::Value) -> Result<()> {
    let header = CheckpointHeader {
        kind: CheckpointKind::Adapters,
        model: config.clone(),
        meta,
    };
    write(path, &encode(&header, &adapters.sites_named(config)))
}

pub fn load_adapters(path: &Path) -> Result<(CheckpointHeader, LoraAdapterSet)> {
    let (header, tensors) = read(path, CheckpointKind::Adapters)?;
    let params = LoraParams::from_named(&header.model, &tensors)?;
    Ok((header, LoraAdapterSet::from_params(params)))
}
