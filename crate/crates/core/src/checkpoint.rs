//! Named-array container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic     8 bytes  "ABCKPT01"
//! meta_len  u32, then meta_len bytes of UTF-8 (free-form, usually JSON)
//! count     u32
//! count × { name_len u32, name bytes, rows u64, cols u64 }
//! count × rows·cols f64 payloads, in header order
//! ```

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::numerics::Matrix;

const MAGIC: &[u8; 8] = b"ABCKPT01";

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub meta: String,
    pub arrays: Vec<(String, Matrix)>,
}

fn format_err<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Format(msg.into()))
}

fn take<'a>(buf: &mut &'a [u8], n: usize) -> Result<&'a [u8]> {
    if buf.len() < n {
        return format_err("checkpoint is truncated");
    }
    let (head, tail) = buf.split_at(n);
    *buf = tail;
    Ok(head)
}

fn u32_at(buf: &mut &[u8]) -> Result<u32> {
    Ok(u32::from_le_bytes(take(buf, 4)?.try_into().expect("4 bytes")))
}

fn u64_at(buf: &mut &[u8]) -> Result<u64> {
    Ok(u64::from_le_bytes(take(buf, 8)?.try_into().expect("8 bytes")))
}

impl Checkpoint {
    pub fn new(meta: impl Into<String>) -> Self {
        Self { meta: meta.into(), arrays: Vec::new() }
    }

    pub fn get(&self, name: &str) -> Option<&Matrix> {
        self.arrays.iter().find(|(n, _)| n == name).map(|(_, m)| m)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let payload: usize = self.arrays.iter().map(|(_, m)| m.len() * 8).sum();
        let mut out = Vec::with_capacity(64 + self.meta.len() + payload);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(self.meta.len() as u32).to_le_bytes());
        out.extend_from_slice(self.meta.as_bytes());
        out.extend_from_slice(&(self.arrays.len() as u32).to_le_bytes());
        for (name, m) in &self.arrays {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(m.rows() as u64).to_le_bytes());
            out.extend_from_slice(&(m.cols() as u64).to_le_bytes());
        }
        for (_, m) in &self.arrays {
            for x in m.as_slice() {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut buf = bytes;
        if take(&mut buf, 8)? != MAGIC {
            return format_err("not a checkpoint (bad magic)");
        }
        let meta_len = u32_at(&mut buf)? as usize;
        let meta = String::from_utf8(take(&mut buf, meta_len)?.to_vec())
            .map_err(|_| Error::Format("checkpoint metadata is not UTF-8".into()))?;
        let count = u32_at(&mut buf)? as usize;
        let mut header = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            let len = u32_at(&mut buf)? as usize;
            let name = String::from_utf8(take(&mut buf, len)?.to_vec())
                .map_err(|_| Error::Format("array name is not UTF-8".into()))?;
            let rows = u64_at(&mut buf)? as usize;
            let cols = u64_at(&mut buf)? as usize;
            header.push((name, rows, cols));
        }
        let mut arrays = Vec::with_capacity(header.len());
        for (name, rows, cols) in header {
            let n = rows.checked_mul(cols).and_then(|n| n.checked_mul(8));
            let Some(n) = n else { return format_err(format!("array `{name}` is too large")) };
            let raw = take(&mut buf, n)?;
            let data = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
            let m = Matrix::from_vec(rows, cols, data).map_err(|e| Error::Format(format!("array `{name}`: {e}")))?;
            arrays.push((name, m));
        }
        if !buf.is_empty() {
            return format_err(format!("{} trailing bytes after the last array", buf.len()));
        }
        Ok(Self { meta, arrays })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut f = fs::File::create(path)?;
        f.write_all(&self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let mut bytes = Vec::new();
        fs::File::open(path)?.read_to_end(&mut bytes)?;
        Self::from_bytes(&bytes)
    }
}
