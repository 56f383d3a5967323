//! Versioned container of named `f32` tensors plus a key/value config echo.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic      4 bytes  "OCKP"
//! version    u32      1
//! n_config   u32
//!   key      u16 length + UTF-8
//!   value    u16 length + UTF-8
//! n_tensors  u32
//!   name     u16 length + UTF-8
//!   ndim     u8
//!   dims     ndim x u32
//!   data     prod(dims) x f32
//! ```

use sha2::{Digest, Sha256};

use super::params::ParamStore;
use super::tensor::Tensor;
use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"OCKP";
pub const CHECKPOINT_VERSION: u32 = 1;

pub type ConfigEcho = Vec<(String, String)>;

fn put_str(out: &mut Vec<u8>, s: &str) {
    out.extend_from_slice(&(s.len() as u16).to_le_bytes());
    out.extend_from_slice(s.as_bytes());
}

pub fn save_checkpoint(params: &ParamStore, config: &[(String, String)]) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(&CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(config.len() as u32).to_le_bytes());
    for (k, v) in config {
        put_str(&mut out, k);
        put_str(&mut out, v);
    }
    out.extend_from_slice(&(params.len() as u32).to_le_bytes());
    for (name, t) in params.iter() {
        put_str(&mut out, name);
        out.push(t.shape().len() as u8);
        for &d in t.shape() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &x in t.data() {
            out.extend_from_slice(&(x as f32).to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let s = self
            .buf
            .get(self.pos..self.pos + n)
            .ok_or_else(|| Error::parse("checkpoint truncated"))?;
        self.pos += n;
        Ok(s)
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u16()? as usize;
        String::from_utf8(self.take(n)?.to_vec())
            .map_err(|_| Error::parse("checkpoint string is not UTF-8"))
    }
}

pub fn load_checkpoint(bytes: &[u8]) -> Result<(ParamStore, ConfigEcho)> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(4)? != CHECKPOINT_MAGIC {
        return Err(Error::parse("not a checkpoint (bad magic)"));
    }
    let version = r.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::parse(format!(
            "unsupported checkpoint version {version}"
        )));
    }
    let mut config = Vec::new();
    for _ in 0..r.u32()? {
        let k = r.string()?;
        let v = r.string()?;
        config.push((k, v));
    }
    let mut params = ParamStore::new();
    for _ in 0..r.u32()? {
        let name = r.string()?;
        let ndim = r.take(1)?[0] as usize;
        let shape: Vec<usize> = (0..ndim)
            .map(|_| r.u32().map(|d| d as usize))
            .collect::<Result<_>>()?;
        let n: usize = shape.iter().product();
        let raw = r.take(n * 4)?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect();
        params.insert(&name, Tensor::from_vec(&shape, data)?);
    }
    if r.pos != bytes.len() {
        return Err(Error::parse("trailing bytes after checkpoint"));
    }
    Ok((params, config))
}

pub fn digest(bytes: &[u8]) -> [u8; 32] {
    Sha256::digest(bytes).into()
}

pub fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}
