//! Self-describing binary container for named tensors.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic "GCLT" | version u32 | manifest length u64 | manifest (UTF-8 JSON)
//! tensor count u64
//! per tensor: name length u32 | name | width u8 (4 or 8) | rank u8 |
//!             extents u64 x rank | values
//! ```

use std::fs;
use std::path::Path;

use serde_json::Value;

use crate::error::{Error, Result};
use crate::numerics::{Real, Tensor};

const MAGIC: &[u8; 4] = b"GCLT";
const VERSION: u32 = 1;

pub fn encode<T: Real>(manifest: &Value, tensors: &[(String, &Tensor<T>)]) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    let m = serde_json::to_vec(manifest)?;
    out.extend_from_slice(&(m.len() as u64).to_le_bytes());
    out.extend_from_slice(&m);
    out.extend_from_slice(&(tensors.len() as u64).to_le_bytes());
    for (name, t) in tensors {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(T::BYTES);
        out.push(t.rank() as u8);
        for &d in t.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &v in t.data() {
            v.write_le(&mut out);
        }
    }
    Ok(out)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::Container {
                path: None,
                reason: format!("truncated at byte {}", self.pos),
            });
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

fn bad(reason: impl Into<String>) -> Error {
    Error::Container {
        path: None,
        reason: reason.into(),
    }
}

/// Decode a container into `T` tensors. Values stored at the other width are
/// converted; same-width round trips are bit-exact.
pub fn decode<T: Real>(buf: &[u8]) -> Result<(Value, Vec<(String, Tensor<T>)>)> {
    let mut r = Reader { buf, pos: 0 };
    if r.take(4)? != MAGIC {
        return Err(bad("bad magic"));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(bad(format!("unsupported version {version}")));
    }
    let mlen = r.u64()? as usize;
    let manifest: Value = serde_json::from_slice(r.take(mlen)?)?;
    let count = r.u64()? as usize;
    let mut tensors = Vec::with_capacity(count.min(1 << 16));
    for _ in 0..count {
        let nlen = r.u32()? as usize;
        let name = String::from_utf8(r.take(nlen)?.to_vec()).map_err(|_| bad("tensor name is not UTF-8"))?;
        let width = r.take(1)?[0];
        let rank = r.take(1)?[0] as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u64()? as usize);
        }
        let n: usize = shape.iter().product();
        let bytes = r.take(n.checked_mul(width as usize).ok_or_else(|| bad("size overflow"))?)?;
        let data: Vec<T> = match width {
            // native width: bit-exact
            w if w == T::BYTES => bytes.chunks_exact(w as usize).map(T::read_le).collect(),
            4 => bytes.chunks_exact(4).map(|b| T::lit(f32::read_le(b) as f64)).collect(),
            8 => bytes.chunks_exact(8).map(|b| T::lit(f64::read_le(b))).collect(),
            w => return Err(bad(format!("tensor {name}: unsupported width {w}"))),
        };
        let t = Tensor::new(&shape, data).map_err(|e| bad(format!("tensor {name}: {e}")))?;
        tensors.push((name, t));
    }
    if r.pos != buf.len() {
        return Err(bad("trailing bytes"));
    }
    Ok((manifest, tensors))
}

pub fn write<T: Real>(path: &Path, manifest: &Value, tensors: &[(String, &Tensor<T>)]) -> Result<()> {
    let bytes = encode(manifest, tensors)?;
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read<T: Real>(path: &Path) -> Result<(Value, Vec<(String, Tensor<T>)>)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes).map_err(|e| match e {
        Error::Container { reason, .. } => Error::Container {
            path: Some(path.to_path_buf()),
            reason,
        },
        other => other,
    })
}
