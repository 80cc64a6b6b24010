//! `LSWP` raw tensor container.
//!
//! Layout: the four magic bytes `LSWP`, a version byte, a rank byte, `rank`
//! little-endian `u32` extents, then the little-endian `f32` payload.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::numerics::Tensor;

pub const MAGIC: &[u8; 4] = b"LSWP";
pub const VERSION: u8 = 1;

pub fn write_tensor(w: &mut impl Write, t: &Tensor) -> std::io::Result<()> {
    let rank = u8::try_from(t.rank())
        .map_err(|_| std::io::Error::new(std::io::ErrorKind::InvalidInput, "rank exceeds 255"))?;
    w.write_all(MAGIC)?;
    w.write_all(&[VERSION, rank])?;
    for &d in t.shape() {
        let d = u32::try_from(d).map_err(|_| {
            std::io::Error::new(std::io::ErrorKind::InvalidInput, "extent exceeds u32")
        })?;
        w.write_all(&d.to_le_bytes())?;
    }
    for v in t.data() {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

pub fn encode_tensor(t: &Tensor) -> Vec<u8> {
    let mut buf = Vec::with_capacity(6 + 4 * t.rank() + 4 * t.len());
    write_tensor(&mut buf, t).expect("tensor extents fit the container");
    buf
}

pub fn read_tensor(r: &mut impl Read) -> Result<Tensor> {
    let fail = |e: std::io::Error| Error::format("tensor", e.to_string());
    let mut head = [0u8; 6];
    r.read_exact(&mut head).map_err(fail)?;
    if &head[..4] != MAGIC {
        return Err(Error::format("tensor", "bad magic"));
    }
    if head[4] != VERSION {
        return Err(Error::format("tensor", format!("unsupported version {}", head[4])));
    }
    let rank = head[5] as usize;
    let mut shape = Vec::with_capacity(rank);
    let mut word = [0u8; 4];
    for _ in 0..rank {
        r.read_exact(&mut word).map_err(fail)?;
        shape.push(u32::from_le_bytes(word) as usize);
    }
    let n = shape
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .ok_or_else(|| Error::format("tensor", "extent product overflows"))?;
    let mut bytes = vec![0u8; n * 4];
    r.read_exact(&mut bytes).map_err(fail)?;
    let data = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    Tensor::new(shape, data)
}

pub fn load_tensor(path: &Path) -> Result<Tensor> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut cursor = bytes.as_slice();
    let t = read_tensor(&mut cursor)?;
    if !cursor.is_empty() {
        return Err(Error::format("tensor", "trailing bytes after payload"));
    }
    Ok(t)
}

pub fn save_tensor(path: &Path, t: &Tensor) -> Result<()> {
    write_atomic(path, &encode_tensor(t))
}

/// Writes to a sibling temporary file, then renames over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(format!(".tmp{}", std::process::id()));
    let tmp = std::path::PathBuf::from(tmp);
    fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}
