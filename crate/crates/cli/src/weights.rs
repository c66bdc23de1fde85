//! Binary weights file: `"NTKW"`, format version (u32), value count (u64),
//! then little-endian f64 values.

use std::io::{Read, Write};
use std::path::Path;

use anyhow::{bail, Context, Result};

pub const MAGIC: &[u8; 4] = b"NTKW";
pub const VERSION: u32 = 1;

pub fn encode(values: &[f64]) -> Vec<u8> {
    let mut buf = Vec::with_capacity(16 + 8 * values.len());
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.extend_from_slice(&(values.len() as u64).to_le_bytes());
    for v in values {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    buf
}

pub fn decode(buf: &[u8]) -> Result<Vec<f64>> {
    if buf.len() < 16 || &buf[..4] != MAGIC {
        bail!("not a weights file");
    }
    let version = u32::from_le_bytes(buf[4..8].try_into().expect("4 bytes"));
    if version != VERSION {
        bail!("unsupported weights version {version}");
    }
    let len = u64::from_le_bytes(buf[8..16].try_into().expect("8 bytes")) as usize;
    let body = &buf[16..];
    if body.len() != len.saturating_mul(8) {
        bail!("weights file holds {} bytes, header announces {len} values", body.len());
    }
    Ok(body
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect())
}

pub fn write_weights(path: &Path, values: &[f64]) -> Result<()> {
    let mut f = std::fs::File::create(path)
        .with_context(|| format!("cannot create {}", path.display()))?;
    f.write_all(&encode(values))?;
    Ok(())
}

pub fn read_weights(path: &Path) -> Result<Vec<f64>> {
    let mut buf = Vec::new();
    std::fs::File::open(path)
        .with_context(|| format!("cannot open {}", path.display()))?
        .read_to_end(&mut buf)?;
    decode(&buf)
}
