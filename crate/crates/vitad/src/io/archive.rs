//! Weight archive: a flat list of named little-endian `f32` tensors.
//!
//! ```text
//! "VTAD" | version u16 | count u32
//! per tensor: name_len u16 | name | dtype u8 | ndim u8 | dims u32×ndim | payload_len u32 | payload
//! ```

use std::collections::HashSet;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"VTAD";
pub const VERSION: u16 = 1;
const DTYPE_F32: u8 = 0;

pub fn encode_archive(tensors: &[(String, Tensor)]) -> Result<Vec<u8>> {
    let mut seen = HashSet::new();
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&u32::try_from(tensors.len()).map_err(|_| Error::Format("too many tensors".into()))?.to_le_bytes());
    for (name, t) in tensors {
        if !seen.insert(name.as_str()) {
            return Err(Error::Format(format!("duplicate tensor name {name:?}")));
        }
        let name_len = u16::try_from(name.len()).map_err(|_| Error::Format(format!("name too long: {name:?}")))?;
        let ndim = u8::try_from(t.ndim()).map_err(|_| Error::Format(format!("{name}: too many dimensions")))?;
        out.extend_from_slice(&name_len.to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(DTYPE_F32);
        out.push(ndim);
        for &d in t.shape() {
            let d = u32::try_from(d).map_err(|_| Error::Format(format!("{name}: extent {d} too large")))?;
            out.extend_from_slice(&d.to_le_bytes());
        }
        let payload = u32::try_from(t.numel() * 4).map_err(|_| Error::Format(format!("{name}: tensor too large")))?;
        out.extend_from_slice(&payload.to_le_bytes());
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| {
            Error::Format(format!(
                "archive truncated at byte {} reading {what} ({n} bytes needed, {} left)",
                self.pos,
                self.bytes.len() - self.pos
            ))
        })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }
}

pub fn decode_archive(bytes: &[u8]) -> Result<Vec<(String, Tensor)>> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4, "magic")? != MAGIC {
        return Err(Error::Format("not a weight archive: bad magic at byte 0".into()));
    }
    let version = r.u16("version")?;
    if version != VERSION {
        return Err(Error::Format(format!("unsupported archive version {version} at byte 4")));
    }
    let count = r.u32("tensor count")?;
    let mut seen = HashSet::new();
    let mut out = Vec::new();
    for _ in 0..count {
        let at = r.pos;
        let name_len = r.u16("name length")? as usize;
        let name = std::str::from_utf8(r.take(name_len, "name")?)
            .map_err(|_| Error::Format(format!("tensor name at byte {at} is not UTF-8")))?
            .to_string();
        let dtype_at = r.pos;
        let dtype = r.u8("dtype")?;
        if dtype != DTYPE_F32 {
            return Err(Error::Format(format!("{name}: unknown dtype tag {dtype} at byte {dtype_at}")));
        }
        let ndim = r.u8("ndim")? as usize;
        let shape = (0..ndim)
            .map(|_| r.u32("extent").map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let payload_at = r.pos;
        let payload_len = r.u32("payload length")? as usize;
        let numel: usize = shape.iter().product();
        if ndim == 0 || numel == 0 || payload_len != numel * 4 {
            return Err(Error::Format(format!(
                "{name}: shape {shape:?} does not match payload of {payload_len} bytes at byte {payload_at}"
            )));
        }
        let data = r
            .take(payload_len, "payload")?
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        if !seen.insert(name.clone()) {
            return Err(Error::Format(format!("duplicate tensor name {name:?} at byte {at}")));
        }
        out.push((name, Tensor::new(shape, data)?));
    }
    if r.pos != bytes.len() {
        return Err(Error::Format(format!("{} trailing bytes after byte {}", bytes.len() - r.pos, r.pos)));
    }
    Ok(out)
}

pub fn save_archive(tensors: &[(String, Tensor)], path: &Path) -> Result<()> {
    let bytes = encode_archive(tensors)?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn load_archive(path: &Path) -> Result<Vec<(String, Tensor)>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_archive(&bytes).map_err(|e| match e {
        Error::Format(m) => Error::Format(format!("{}: {m}", path.display())),
        other => other,
    })
}
