//! IDX (MNIST ubyte) parsing, with transparent gzip.
//!
//! The byte-level parsers are separated from file IO so they can be driven
//! directly by tests and fuzzers.

use std::io::Read;
use std::path::Path;

use byteorder::{BigEndian, ByteOrder};

use crate::error::{Error, Result};
use crate::ndcore::Matrix;

pub const IMAGES_MAGIC: u32 = 0x0000_0803; // 2051
pub const LABELS_MAGIC: u32 = 0x0000_0801; // 2049

#[derive(Clone, Debug)]
pub struct Dataset {
    /// N x (rows*cols), pixel values scaled to [0,1].
    pub images: Matrix,
    pub labels: Vec<usize>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn feature_dim(&self) -> usize {
        self.images.cols()
    }
}

fn need(bytes: &[u8], expected: usize, origin: &str) -> Result<()> {
    if bytes.len() < expected {
        return Err(Error::IdxTruncated {
            path: origin.to_string(),
            expected,
            got: bytes.len(),
        });
    }
    Ok(())
}

/// Parse an IDX3 ubyte image file: (count, feature_dim, pixels/255).
pub fn parse_idx_images(bytes: &[u8], origin: &str) -> Result<(usize, usize, Vec<f64>)> {
    need(bytes, 16, origin)?;
    let magic = BigEndian::read_u32(&bytes[0..4]);
    if magic != IMAGES_MAGIC {
        return Err(Error::IdxMagic {
            path: origin.to_string(),
            expected: IMAGES_MAGIC,
            got: magic,
        });
    }
    let count = BigEndian::read_u32(&bytes[4..8]) as usize;
    let rows = BigEndian::read_u32(&bytes[8..12]) as usize;
    let cols = BigEndian::read_u32(&bytes[12..16]) as usize;
    let dim = rows
        .checked_mul(cols)
        .ok_or_else(|| Error::Checkpoint(format!("idx dims overflow in {origin}")))?;
    let payload = count
        .checked_mul(dim)
        .ok_or_else(|| Error::Checkpoint(format!("idx payload overflow in {origin}")))?;
    need(bytes, 16 + payload, origin)?;
    let pixels = bytes[16..16 + payload]
        .iter()
        .map(|&b| b as f64 / 255.0)
        .collect();
    Ok((count, dim, pixels))
}

/// Parse an IDX1 ubyte label file.
pub fn parse_idx_labels(bytes: &[u8], origin: &str) -> Result<Vec<usize>> {
    need(bytes, 8, origin)?;
    let magic = BigEndian::read_u32(&bytes[0..4]);
    if magic != LABELS_MAGIC {
        return Err(Error::IdxMagic {
            path: origin.to_string(),
            expected: LABELS_MAGIC,
            got: magic,
        });
    }
    let count = BigEndian::read_u32(&bytes[4..8]) as usize;
    need(bytes, 8 + count, origin)?;
    Ok(bytes[8..8 + count].iter().map(|&b| b as usize).collect())
}

/// Read a file, gunzipping if it starts with the gzip magic.
pub fn read_maybe_gzip(path: &Path) -> Result<Vec<u8>> {
    let raw = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    if raw.len() >= 2 && raw[0] == 0x1f && raw[1] == 0x8b {
        let mut out = Vec::new();
        flate2::read::GzDecoder::new(&raw[..])
            .read_to_end(&mut out)
            .map_err(|e| Error::io(path, e))?;
        Ok(out)
    } else {
        Ok(raw)
    }
}

pub fn load_idx(images_path: &Path, labels_path: &Path) -> Result<Dataset> {
    let image_bytes = read_maybe_gzip(images_path)?;
    let label_bytes = read_maybe_gzip(labels_path)?;
    let (n_images, dim, pixels) =
        parse_idx_images(&image_bytes, &images_path.display().to_string())?;
    let labels = parse_idx_labels(&label_bytes, &labels_path.display().to_string())?;
    if n_images != labels.len() {
        return Err(Error::IdxCountMismatch {
            images: n_images,
            labels: labels.len(),
        });
    }
    if n_images == 0 {
        return Err(Error::EmptyDataset("load_idx"));
    }
    Ok(Dataset {
        images: Matrix::from_vec(n_images, dim, pixels),
        labels,
    })
}

/// Serialize a dataset back to IDX bytes (test/tooling support).
pub fn encode_idx_images(count: usize, rows: usize, cols: usize, pixels: &[u8]) -> Vec<u8> {
    assert_eq!(pixels.len(), count * rows * cols);
    let mut out = Vec::with_capacity(16 + pixels.len());
    out.extend_from_slice(&IMAGES_MAGIC.to_be_bytes());
    out.extend_from_slice(&(count as u32).to_be_bytes());
    out.extend_from_slice(&(rows as u32).to_be_bytes());
    out.extend_from_slice(&(cols as u32).to_be_bytes());
    out.extend_from_slice(pixels);
    out
}

pub fn encode_idx_labels(labels: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + labels.len());
    out.extend_from_slice(&LABELS_MAGIC.to_be_bytes());
    out.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    out.extend_from_slice(labels);
    out
}
