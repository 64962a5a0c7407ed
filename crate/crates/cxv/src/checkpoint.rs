//! Checkpoint file format, shared by the trainer and the CLI.
//!
//! Layout: magic `CXVCKPT1`, then little-endian u32 tensor count, then per
//! tensor: u16 name length, UTF-8 name, u8 dtype code (0 = f32, 1 = f64),
//! u8 rank, rank x u32 dims, raw little-endian scalar data. Optimizer and
//! controller state ride along as tensors named with an `opt.` prefix.

use std::path::Path;

use crate::error::{CxvError, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"CXVCKPT1";

pub fn to_bytes<E: Scalar>(entries: &[(String, Tensor<E>)]) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    let count = u32::try_from(entries.len())
        .map_err(|_| CxvError::Checkpoint("too many tensors".into()))?;
    out.extend_from_slice(&count.to_le_bytes());
    for (name, t) in entries {
        let name_bytes = name.as_bytes();
        let name_len = u16::try_from(name_bytes.len())
            .map_err(|_| CxvError::Checkpoint(format!("tensor name too long: {name}")))?;
        out.extend_from_slice(&name_len.to_le_bytes());
        out.extend_from_slice(name_bytes);
        out.push(E::DTYPE_CODE);
        let rank = u8::try_from(t.rank())
            .map_err(|_| CxvError::Checkpoint(format!("rank too large for {name}")))?;
        out.push(rank);
        for &d in t.shape() {
            let d = u32::try_from(d)
                .map_err(|_| CxvError::Checkpoint(format!("dim too large in {name}")))?;
            out.extend_from_slice(&d.to_le_bytes());
        }
        for v in t.data().iter() {
            out.extend_from_slice(&v.to_le_bytes_vec());
        }
    }
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(CxvError::Checkpoint(format!(
                "truncated checkpoint at byte {}",
                self.pos
            )));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u16_le(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32_le(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
}

pub fn from_bytes<E: Scalar>(bytes: &[u8]) -> Result<Vec<(String, Tensor<E>)>> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(8)? != MAGIC {
        return Err(CxvError::Checkpoint("bad magic; not a checkpoint".into()));
    }
    let count = r.u32_le()? as usize;
    let mut entries = Vec::with_capacity(count);
    for _ in 0..count {
        let name_len = r.u16_le()? as usize;
        let name = std::str::from_utf8(r.take(name_len)?)
            .map_err(|_| CxvError::Checkpoint("tensor name is not UTF-8".into()))?
            .to_string();
        let dtype = r.u8()?;
        if dtype != E::DTYPE_CODE {
            return Err(CxvError::Checkpoint(format!(
                "dtype code {dtype} in '{name}' does not match the run precision (expected {})",
                E::DTYPE_CODE
            )));
        }
        let rank = r.u8()? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u32_le()? as usize);
        }
        let numel: usize = shape.iter().product();
        let raw = r.take(numel * E::BYTE_WIDTH)?;
        let data: Vec<E> = raw
            .chunks_exact(E::BYTE_WIDTH)
            .map(E::from_le_slice)
            .collect();
        entries.push((name, Tensor::from_vec(data, &shape)?));
    }
    if r.pos != bytes.len() {
        return Err(CxvError::Checkpoint(format!(
            "{} trailing bytes after the last tensor",
            bytes.len() - r.pos
        )));
    }
    Ok(entries)
}

pub fn save<E: Scalar>(path: &Path, entries: &[(String, Tensor<E>)]) -> Result<()> {
    let bytes = to_bytes(entries)?;
    std::fs::write(path, bytes)
        .map_err(|e| CxvError::Checkpoint(format!("cannot write {}: {e}", path.display())))
}

pub fn load<E: Scalar>(path: &Path) -> Result<Vec<(String, Tensor<E>)>> {
    let bytes = std::fs::read(path)
        .map_err(|e| CxvError::Checkpoint(format!("cannot read {}: {e}", path.display())))?;
    from_bytes(&bytes)
}
