//! Binary checkpoint format, all integers little-endian:
//!
//! ```text
//! magic        8 bytes   "AMOPOCK1"
//! header_len   u64
//! header       header_len bytes of UTF-8 JSON:
//!              {"format_version":1,"model":{..ModelConfig..},"metadata":{..}}
//! param_count  u32
//! per parameter, in ModelConfig::param_layout order:
//!   name_len   u32
//!   name       name_len bytes UTF-8
//!   ndim       u32
//!   dims       ndim x u64
//!   values     product(dims) x f64, row-major
//! ```
//!
//! Values are always stored as f64, so f32 and f64 models round-trip exactly.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::scalar::Scalar;

use super::{ModelConfig, Param, PolicyError, PolicyModel};

pub const MAGIC: &[u8; 8] = b"AMOPOCK1";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub format_version: u32,
    pub model: ModelConfig,
    #[serde(default)]
    pub metadata: BTreeMap<String, String>,
}

fn corrupt(msg: impl Into<String>) -> PolicyError {
    PolicyError::Checkpoint(msg.into())
}

pub fn write_checkpoint<T: Scalar, W: Write>(
    model: &PolicyModel<T>,
    metadata: &BTreeMap<String, String>,
    mut out: W,
) -> Result<(), PolicyError> {
    let header = CheckpointHeader {
        format_version: FORMAT_VERSION,
        model: model.config().clone(),
        metadata: metadata.clone(),
    };
    let header = serde_json::to_vec(&header).map_err(|e| corrupt(e.to_string()))?;
    let mut buf = Vec::with_capacity(64 + header.len() + model.num_params() * 8);
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&(header.len() as u64).to_le_bytes());
    buf.extend_from_slice(&header);
    buf.extend_from_slice(&(model.params().len() as u32).to_le_bytes());
    for p in model.params() {
        buf.extend_from_slice(&(p.name.len() as u32).to_le_bytes());
        buf.extend_from_slice(p.name.as_bytes());
        buf.extend_from_slice(&(p.shape.len() as u32).to_le_bytes());
        for &d in &p.shape {
            buf.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for v in &p.values {
            buf.extend_from_slice(&v.f64().to_le_bytes());
        }
    }
    out.write_all(&buf)?;
    Ok(())
}

struct Cursor<'a> {
    data: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], PolicyError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.data.len());
        let end = end.ok_or_else(|| corrupt(format!("truncated at byte {}", self.pos)))?;
        let s = &self.data[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, PolicyError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64, PolicyError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

pub fn read_checkpoint<T: Scalar, R: Read>(
    mut input: R,
) -> Result<(PolicyModel<T>, CheckpointHeader), PolicyError> {
    let mut data = Vec::new();
    input.read_to_end(&mut data)?;
    let mut c = Cursor { data: &data, pos: 0 };
    if c.take(8)? != MAGIC {
        return Err(corrupt("bad magic"));
    }
    let header_len = c.u64()? as usize;
    let header: CheckpointHeader =
        serde_json::from_slice(c.take(header_len)?).map_err(|e| corrupt(format!("header: {e}")))?;
    if header.format_version != FORMAT_VERSION {
        return Err(corrupt(format!("unsupported format version {}", header.format_version)));
    }
    let count = c.u32()? as usize;
    let mut params = Vec::with_capacity(count);
    for _ in 0..count {
        let name_len = c.u32()? as usize;
        let name = std::str::from_utf8(c.take(name_len)?)
            .map_err(|_| corrupt("parameter name is not UTF-8"))?
            .to_string();
        let ndim = c.u32()? as usize;
        let shape = (0..ndim).map(|_| c.u64().map(|d| d as usize)).collect::<Result<Vec<_>, _>>()?;
        let n: usize = shape.iter().product();
        let raw = c.take(n.checked_mul(8).ok_or_else(|| corrupt("parameter too large"))?)?;
        let values = raw
            .chunks_exact(8)
            .map(|b| T::of(f64::from_le_bytes(b.try_into().expect("8 bytes"))))
            .collect();
        params.push(Param { name, shape, values });
    }
    if c.pos != data.len() {
        return Err(corrupt(format!("{} trailing bytes", data.len() - c.pos)));
    }
    let model = PolicyModel::from_parts(header.model.clone(), params)?;
    Ok((model, header))
}

pub fn save_checkpoint<T: Scalar>(
    model: &PolicyModel<T>,
    metadata: &BTreeMap<String, String>,
    path: &Path,
) -> Result<(), PolicyError> {
    let file = std::fs::File::create(path)?;
    write_checkpoint(model, metadata, std::io::BufWriter::new(file))
}

pub fn load_checkpoint<T: Scalar>(path: &Path) -> Result<(PolicyModel<T>, CheckpointHeader), PolicyError> {
    read_checkpoint(std::fs::File::open(path)?)
}
