//! IDX container (the MNIST family format): big-endian headers followed by
//! unsigned bytes. Paths ending in `.gz` are transparently (de)compressed.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use flate2::read::GzDecoder;
use flate2::write::GzEncoder;
use flate2::Compression;

use super::Dataset;
use crate::error::{Error, Result};
use crate::linalg::Matrix;

const IMAGES_MAGIC: u32 = 0x0000_0803;
const LABELS_MAGIC: u32 = 0x0000_0801;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct IdxImages {
    pub count: usize,
    pub rows: usize,
    pub cols: usize,
    pub pixels: Vec<u8>,
}

fn is_gz(path: &Path) -> bool {
    path.extension().is_some_and(|e| e == "gz")
}

fn read_all(path: &Path) -> Result<Vec<u8>> {
    let file = BufReader::new(File::open(path)?);
    let mut buf = Vec::new();
    if is_gz(path) {
        GzDecoder::new(file).read_to_end(&mut buf)?;
    } else {
        let mut file = file;
        file.read_to_end(&mut buf)?;
    }
    Ok(buf)
}

fn write_all(path: &Path, bytes: &[u8]) -> Result<()> {
    let file = BufWriter::new(File::create(path)?);
    if is_gz(path) {
        let mut enc = GzEncoder::new(file, Compression::default());
        enc.write_all(bytes)?;
        enc.finish()?.flush()?;
    } else {
        let mut file = file;
        file.write_all(bytes)?;
        file.flush()?;
    }
    Ok(())
}

fn be_u32(buf: &[u8], at: usize, what: &str) -> Result<u32> {
    buf.get(at..at + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| Error::Format(format!("truncated header ({what})")))
}

pub fn parse_idx_images(buf: &[u8]) -> Result<IdxImages> {
    let magic = be_u32(buf, 0, "magic")?;
    if magic != IMAGES_MAGIC {
        return Err(Error::Format(format!(
            "bad image magic 0x{magic:08x}, expected 0x{IMAGES_MAGIC:08x}"
        )));
    }
    let count = be_u32(buf, 4, "count")? as usize;
    let rows = be_u32(buf, 8, "rows")? as usize;
    let cols = be_u32(buf, 12, "cols")? as usize;
    let need = count * rows * cols;
    let body = &buf[16..];
    if body.len() < need {
        return Err(Error::Format(format!(
            "truncated image file: need {need} pixel bytes, found {}",
            body.len()
        )));
    }
    Ok(IdxImages {
        count,
        rows,
        cols,
        pixels: body[..need].to_vec(),
    })
}

pub fn parse_idx_labels(buf: &[u8]) -> Result<Vec<u8>> {
    let magic = be_u32(buf, 0, "magic")?;
    if magic != LABELS_MAGIC {
        return Err(Error::Format(format!(
            "bad label magic 0x{magic:08x}, expected 0x{LABELS_MAGIC:08x}"
        )));
    }
    let count = be_u32(buf, 4, "count")? as usize;
    let body = &buf[8..];
    if body.len() < count {
        return Err(Error::Format(format!(
            "truncated label file: need {count} bytes, found {}",
            body.len()
        )));
    }
    Ok(body[..count].to_vec())
}

pub fn read_idx_images(path: impl AsRef<Path>) -> Result<IdxImages> {
    parse_idx_images(&read_all(path.as_ref())?)
}

pub fn read_idx_labels(path: impl AsRef<Path>) -> Result<Vec<u8>> {
    parse_idx_labels(&read_all(path.as_ref())?)
}

pub fn write_idx_images(path: impl AsRef<Path>, images: &IdxImages) -> Result<()> {
    if images.pixels.len() != images.count * images.rows * images.cols {
        return Err(Error::shape(
            "write_idx_images",
            images.count * images.rows * images.cols,
            images.pixels.len(),
        ));
    }
    let mut buf = Vec::with_capacity(16 + images.pixels.len());
    for v in [
        IMAGES_MAGIC,
        images.count as u32,
        images.rows as u32,
        images.cols as u32,
    ] {
        buf.extend_from_slice(&v.to_be_bytes());
    }
    buf.extend_from_slice(&images.pixels);
    write_all(path.as_ref(), &buf)
}

pub fn write_idx_labels(path: impl AsRef<Path>, labels: &[u8]) -> Result<()> {
    let mut buf = Vec::with_capacity(8 + labels.len());
    buf.extend_from_slice(&LABELS_MAGIC.to_be_bytes());
    buf.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    buf.extend_from_slice(labels);
    write_all(path.as_ref(), &buf)
}

/// Loads an image/label file pair. Pixels are scaled to [0, 1] by /255 and
/// the class count is one past the largest label.
pub fn load_idx(images: impl AsRef<Path>, labels: impl AsRef<Path>) -> Result<Dataset> {
    let img = read_idx_images(images)?;
    let lab = read_idx_labels(labels)?;
    if img.count != lab.len() {
        return Err(Error::Format(format!(
            "image count {} does not match label count {}",
            img.count,
            lab.len()
        )));
    }
    if img.count == 0 {
        return Err(Error::Format("empty IDX dataset".into()));
    }
    let d1 = img.rows * img.cols;
    let x = Matrix::new(
        img.count,
        d1,
        img.pixels.iter().map(|&p| p as f64 / 255.0).collect(),
    )?;
    let labels: Vec<usize> = lab.iter().map(|&l| l as usize).collect();
    let classes = labels.iter().max().map_or(0, |m| m + 1);
    Dataset::new(x, labels, classes)
}
