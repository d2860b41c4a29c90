//! Versioned binary checkpoints.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! b"LLCK"            magic
//! u32                format version
//! u64 + bytes        model config as JSON
//! u32                number of tensors
//! per tensor, in name order:
//!   u32 + bytes      name (UTF-8)
//!   u32 + bytes      partition label
//!   u32              rank
//!   u64 * rank       dimensions
//!   f64 * len        values, raw IEEE-754 bits
//! ```
//!
//! Values are stored as raw bits, so a round trip is bit-exact. Optimizer
//! state is not stored.

use std::fs;
use std::path::Path;

use super::ModelConfig;
use crate::error::{Error, Result};
use crate::numerics::{ParameterSet, Partition, Tensor};

pub const CHECKPOINT_VERSION: u32 = 1;
const MAGIC: &[u8; 4] = b"LLCK";

pub fn encode_checkpoint(params: &ParameterSet, config: &ModelConfig) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    let json = serde_json::to_vec(config).expect("config serializes");
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(&(params.len() as u32).to_le_bytes());
    for (name, p) in params.iter() {
        write_str(&mut out, name);
        write_str(&mut out, p.partition.as_str());
        let shape = p.value.shape();
        out.extend_from_slice(&(shape.len() as u32).to_le_bytes());
        for &d in shape {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for v in p.value.data() {
            out.extend_from_slice(&v.to_bits().to_le_bytes());
        }
    }
    out
}

fn write_str(out: &mut Vec<u8>, s: &str) {
    out.extend_from_slice(&(s.len() as u32).to_le_bytes());
    out.extend_from_slice(s.as_bytes());
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> std::result::Result<&'a [u8], String> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| format!("truncated at byte {}", self.pos))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> std::result::Result<u32, String> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> std::result::Result<u64, String> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn string(&mut self) -> std::result::Result<String, String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|e| e.to_string())
    }
}

pub fn decode_checkpoint(bytes: &[u8]) -> std::result::Result<(ParameterSet, ModelConfig), String> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(4)? != MAGIC {
        return Err("not a checkpoint (bad magic)".into());
    }
    let version = r.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(format!("unsupported checkpoint version {version}"));
    }
    let json_len = r.u64()? as usize;
    let config: ModelConfig =
        serde_json::from_slice(r.take(json_len)?).map_err(|e| format!("config: {e}"))?;
    let count = r.u32()?;
    let mut params = ParameterSet::new();
    for _ in 0..count {
        let name = r.string()?;
        let part = r.string()?;
        let partition =
            Partition::parse(&part).ok_or_else(|| format!("unknown partition {part:?}"))?;
        let rank = r.u32()? as usize;
        let shape = (0..rank)
            .map(|_| r.u64().map(|d| d as usize))
            .collect::<std::result::Result<Vec<_>, _>>()?;
        let len: usize = shape.iter().product();
        let data = (0..len)
            .map(|_| r.u64().map(f64::from_bits))
            .collect::<std::result::Result<Vec<_>, _>>()?;
        let tensor = Tensor::new(shape, data).map_err(|e| e.to_string())?;
        params.insert(name, tensor, partition);
    }
    if r.pos != bytes.len() {
        return Err(format!("{} trailing bytes", bytes.len() - r.pos));
    }
    Ok((params, config))
}

pub fn save_checkpoint(path: &Path, params: &ParameterSet, config: &ModelConfig) -> Result<()> {
    fs::write(path, encode_checkpoint(params, config)).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<(ParameterSet, ModelConfig)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes).map_err(|detail| Error::Format {
        path: path.to_path_buf(),
        detail,
    })
}
