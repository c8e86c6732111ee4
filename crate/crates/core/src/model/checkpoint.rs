//! Checkpoint layout: magic `BCKP`, u32 version, u32 config length, config
//! as JSON, u32 tensor count, then per tensor: u32 name length, name, u8
//! dtype (0 = f32, 1 = f16), u32 rank, rank × u64 dims, raw little-endian data.

use std::path::Path;

use super::{BertMini, ModelConfig, ModelError};
use crate::half::{f16_to_f32, f32_to_f16, Binary16};
use crate::tensor::{DType, Tensor};

pub const MAGIC: [u8; 4] = *b"BCKP";
pub const VERSION: u32 = 1;

pub fn encode(model: &BertMini) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    let cfg = serde_json::to_vec(model.config()).expect("config serialises");
    out.extend_from_slice(&(cfg.len() as u32).to_le_bytes());
    out.extend_from_slice(&cfg);
    out.extend_from_slice(&(model.tensors().len() as u32).to_le_bytes());
    for (name, t) in model.param_names().iter().zip(model.tensors()) {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(match t.dtype() {
            DType::F32 => 0,
            DType::F16 => 1,
        });
        out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
        for &d in t.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        match t.dtype() {
            DType::F32 => t.data().iter().for_each(|v| out.extend_from_slice(&v.to_le_bytes())),
            DType::F16 => t
                .data()
                .iter()
                .for_each(|&v| out.extend_from_slice(&f32_to_f16(v).to_bits().to_le_bytes())),
        }
    }
    out
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], ModelError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| ModelError::Checkpoint("truncated checkpoint".into()))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, ModelError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64, ModelError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

pub fn decode(buf: &[u8]) -> Result<BertMini, ModelError> {
    let bad = |m: &str| ModelError::Checkpoint(m.to_string());
    let mut c = Cursor { buf, pos: 0 };
    if c.take(4)? != MAGIC {
        return Err(bad("bad magic"));
    }
    if c.u32()? != VERSION {
        return Err(bad("unsupported version"));
    }
    let n = c.u32()? as usize;
    let cfg: ModelConfig = serde_json::from_slice(c.take(n)?).map_err(|e| bad(&e.to_string()))?;
    let mut model = BertMini::new(cfg, 0)?;
    let count = c.u32()? as usize;
    if count != model.tensors().len() {
        return Err(bad("tensor count does not match the config"));
    }
    let mut tensors = Vec::with_capacity(count);
    for i in 0..count {
        let n = c.u32()? as usize;
        let name = std::str::from_utf8(c.take(n)?).map_err(|_| bad("name is not UTF-8"))?;
        if name != model.param_names()[i] {
            return Err(ModelError::Checkpoint(format!("unexpected tensor `{name}`")));
        }
        let dtype = match c.take(1)?[0] {
            0 => DType::F32,
            1 => DType::F16,
            _ => return Err(bad("bad dtype")),
        };
        let rank = c.u32()? as usize;
        let shape: Vec<usize> = (0..rank).map(|_| c.u64().map(|d| d as usize)).collect::<Result<_, _>>()?;
        let numel: usize = shape.iter().product();
        let data: Vec<f32> = match dtype {
            DType::F32 => c
                .take(4 * numel)?
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")))
                .collect(),
            DType::F16 => c
                .take(2 * numel)?
                .chunks_exact(2)
                .map(|b| f16_to_f32(Binary16::from_bits(u16::from_le_bytes([b[0], b[1]]))))
                .collect(),
        };
        tensors.push(Tensor::from_vec(&shape, data)?.cast(dtype));
    }
    if c.pos != buf.len() {
        return Err(bad("trailing bytes"));
    }
    model.set_tensors(tensors)?;
    Ok(model)
}

pub fn save(model: &BertMini, path: &Path) -> Result<(), ModelError> {
    std::fs::write(path, encode(model))?;
    Ok(())
}

pub fn load(path: &Path) -> Result<BertMini, ModelError> {
    decode(&std::fs::read(path)?)
}
