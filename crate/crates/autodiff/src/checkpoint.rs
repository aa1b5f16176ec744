//! Binary named-tensor table.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic   b"SADTENS1"
//! u32     tensor count
//! repeat:
//!   u32   name length, then UTF-8 name bytes
//!   u32   rank, then rank x u64 dims
//!   u8    element width in bytes (4 or 8)
//!   raw   little-endian element data
//! ```

use std::collections::BTreeMap;

use crate::{AutodiffError, Real, Result, Tensor};

const MAGIC: &[u8; 8] = b"SADTENS1";

pub fn encode<T: Real>(table: &BTreeMap<String, Tensor<T>>) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(table.len() as u32).to_le_bytes());
    for (name, t) in table {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
        for &d in t.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        out.push(T::WIDTH);
        for &v in t.data() {
            v.write_le(&mut out);
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| AutodiffError::Corrupt(format!("truncated at byte {}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

/// Decodes a table, converting elements to `T` when the stored width differs.
pub fn decode<T: Real>(bytes: &[u8]) -> Result<BTreeMap<String, Tensor<T>>> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(8)? != MAGIC {
        return Err(AutodiffError::Corrupt("bad magic".into()));
    }
    let count = r.u32()?;
    let mut table = BTreeMap::new();
    for _ in 0..count {
        let name_len = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(name_len)?)
            .map_err(|e| AutodiffError::Corrupt(e.to_string()))?
            .to_string();
        let rank = r.u32()? as usize;
        let shape = (0..rank).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let width = r.take(1)?[0];
        let n: usize = shape.iter().product();
        let raw = r.take(n * width as usize)?;
        let data: Vec<T> = match width {
            4 => raw.chunks_exact(4).map(|c| T::from_f64(f32::read_le(c) as f64)).collect(),
            8 => raw.chunks_exact(8).map(|c| T::from_f64(f64::read_le(c))).collect(),
            w => return Err(AutodiffError::Corrupt(format!("unsupported element width {w}"))),
        };
        table.insert(name, Tensor::new(shape, data)?);
    }
    if r.pos != bytes.len() {
        return Err(AutodiffError::Corrupt("trailing bytes".into()));
    }
    Ok(table)
}
