//! Little-endian framing shared by the embedding, dataset and checkpoint files:
//! 4 magic bytes, a `u32` version, a `u32`-length-prefixed JSON manifest, then
//! a raw payload.

use std::io::{self, Read, Write};

use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::error::{Error, Result};

pub(crate) fn write_header<W: Write, M: Serialize>(
    w: &mut W,
    magic: &[u8; 4],
    version: u32,
    manifest: &M,
) -> Result<()> {
    let json = serde_json::to_vec(manifest).map_err(|e| Error::format(e.to_string()))?;
    let len = u32::try_from(json.len()).map_err(|_| Error::format("manifest too large"))?;
    w.write_all(magic)?;
    w.write_all(&version.to_le_bytes())?;
    w.write_all(&len.to_le_bytes())?;
    w.write_all(&json)?;
    Ok(())
}

pub(crate) fn read_header<R: Read, M: DeserializeOwned>(
    r: &mut R,
    magic: &[u8; 4],
    version: u32,
) -> Result<M> {
    let mut got = [0u8; 4];
    read_exact(r, &mut got)?;
    if &got != magic {
        return Err(Error::format(format!(
            "bad magic {:?}, expected {:?}",
            String::from_utf8_lossy(&got),
            String::from_utf8_lossy(magic)
        )));
    }
    let v = read_u32(r)?;
    if v != version {
        return Err(Error::format(format!("unsupported version {v}, expected {version}")));
    }
    let len = read_u32(r)? as usize;
    if len > 1 << 26 {
        return Err(Error::format(format!("manifest length {len} is implausible")));
    }
    let mut buf = vec![0u8; len];
    read_exact(r, &mut buf)?;
    serde_json::from_slice(&buf).map_err(|e| Error::format(format!("manifest: {e}")))
}

/// `read_exact` that reports truncation as a format error rather than I/O.
pub(crate) fn read_exact<R: Read>(r: &mut R, buf: &mut [u8]) -> Result<()> {
    r.read_exact(buf).map_err(|e| match e.kind() {
        io::ErrorKind::UnexpectedEof => Error::format("unexpected end of file"),
        _ => Error::Io(e),
    })
}

pub(crate) fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    read_exact(r, &mut b)?;
    Ok(u32::from_le_bytes(b))
}

pub(crate) fn read_u64<R: Read>(r: &mut R) -> Result<u64> {
    let mut b = [0u8; 8];
    read_exact(r, &mut b)?;
    Ok(u64::from_le_bytes(b))
}

pub(crate) fn write_f32s<'a, W: Write>(w: &mut W, vals: impl IntoIterator<Item = &'a f32>) -> Result<()> {
    for v in vals {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

pub(crate) fn read_f32s<R: Read>(r: &mut R, n: usize) -> Result<Vec<f32>> {
    let mut buf = vec![0u8; n * 4];
    read_exact(r, &mut buf)?;
    Ok(buf
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect())
}

/// Fails unless the reader is exhausted.
pub(crate) fn expect_eof<R: Read>(r: &mut R) -> Result<()> {
    let mut b = [0u8; 1];
    match r.read(&mut b)? {
        0 => Ok(()),
        _ => Err(Error::format("trailing bytes after last record")),
    }
}
