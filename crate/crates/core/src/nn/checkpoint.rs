//! Versioned binary checkpoint format.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! "OSCK" | version: u32 | adam_step: u64 | count: u32
//! count × tensor            -- parameter values
//! count × tensor            -- Adam first moments
//! count × tensor            -- Adam second moments
//! tensor = name_len: u32 | name bytes | rows: u32 | cols: u32 | rows·cols × f64
//! ```

use std::io::{Read, Write};
use std::path::Path;

use super::params::ParamStore;
use super::tensor::Tensor2;
use crate::error::{OscError, Result};

pub const MAGIC: &[u8; 4] = b"OSCK";
pub const FORMAT_VERSION: u32 = 1;

fn write_tensor(out: &mut Vec<u8>, name: &str, t: &Tensor2) {
    out.extend_from_slice(&(name.len() as u32).to_le_bytes());
    out.extend_from_slice(name.as_bytes());
    out.extend_from_slice(&(t.rows() as u32).to_le_bytes());
    out.extend_from_slice(&(t.cols() as u32).to_le_bytes());
    for v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

pub fn encode(store: &ParamStore) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&store.step().to_le_bytes());
    out.extend_from_slice(&(store.len() as u32).to_le_bytes());
    for id in store.ids() {
        write_tensor(&mut out, store.name(id), store.value(id));
    }
    let (m, v) = store.moments();
    for moments in [m, v] {
        for (id, t) in store.ids().zip(moments) {
            write_tensor(&mut out, store.name(id), t);
        }
    }
    out
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(OscError::Format(format!(
                "checkpoint truncated at byte {}",
                self.pos
            )));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn tensor(&mut self) -> Result<(String, Tensor2)> {
        let n = self.u32()? as usize;
        let name = String::from_utf8(self.take(n)?.to_vec())
            .map_err(|_| OscError::Format("tensor name is not UTF-8".into()))?;
        let rows = self.u32()? as usize;
        let cols = self.u32()? as usize;
        let raw = self.take(rows * cols * 8)?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Ok((name, Tensor2::from_vec(rows, cols, data)?))
    }
}

/// Parses a checkpoint into a fresh store (names and shapes from the file).
pub fn decode(bytes: &[u8]) -> Result<ParamStore> {
    let mut c = Cursor { buf: bytes, pos: 0 };
    if c.take(4)? != MAGIC {
        return Err(OscError::Format("bad checkpoint magic".into()));
    }
    let version = c.u32()?;
    if version != FORMAT_VERSION {
        return Err(OscError::Format(format!(
            "unsupported checkpoint version {version}"
        )));
    }
    let step = c.u64()?;
    let count = c.u32()? as usize;
    let mut store = ParamStore::new();
    let mut names = Vec::with_capacity(count);
    for _ in 0..count {
        let (name, t) = c.tensor()?;
        store.add(&name, t);
        names.push(name);
    }
    let mut moments = [Vec::with_capacity(count), Vec::with_capacity(count)];
    for m in moments.iter_mut() {
        for expected in &names {
            let (name, t) = c.tensor()?;
            if &name != expected {
                return Err(OscError::Format(format!(
                    "moment '{name}' out of order, expected '{expected}'"
                )));
            }
            m.push(t);
        }
    }
    if c.pos != bytes.len() {
        return Err(OscError::Format("trailing bytes after checkpoint".into()));
    }
    let [m, v] = moments;
    store.set_moments(step, m, v);
    Ok(store)
}

/// Copies values and moments from `loaded` into `target`, which must have
/// identical names and shapes.
pub fn restore_into(target: &mut ParamStore, loaded: ParamStore) -> Result<()> {
    if target.names() != loaded.names() {
        return Err(OscError::Format(
            "checkpoint parameter names do not match the network".into(),
        ));
    }
    for id in target.ids().collect::<Vec<_>>() {
        if target.value(id).shape() != loaded.value(id).shape() {
            return Err(OscError::Dimension(format!(
                "parameter '{}' is {:?} in the network but {:?} in the checkpoint",
                target.name(id),
                target.value(id).shape(),
                loaded.value(id).shape()
            )));
        }
    }
    *target = loaded;
    Ok(())
}

pub fn save(store: &ParamStore, path: &Path) -> Result<()> {
    let bytes = encode(store);
    let mut f = std::fs::File::create(path).map_err(|e| OscError::io(path, e))?;
    f.write_all(&bytes).map_err(|e| OscError::io(path, e))
}

pub fn load(path: &Path) -> Result<ParamStore> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| OscError::io(path, e))?;
    decode(&bytes)
}
