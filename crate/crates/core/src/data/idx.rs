//! IDX containers (the MNIST family format), optionally gzip-compressed.

use std::io::Read;
use std::path::Path;

use super::{DataError, Dataset, Image, Split};

pub const IMAGES_MAGIC: u32 = 0x0000_0803;
pub const LABELS_MAGIC: u32 = 0x0000_0801;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct IdxHeader {
    pub magic: u32,
    pub dims: Vec<usize>,
}

impl IdxHeader {
    pub fn payload_len(&self) -> Option<usize> {
        self.dims.iter().try_fold(1usize, |acc, &d| acc.checked_mul(d))
    }
}

fn be_u32(bytes: &[u8], at: usize) -> Option<u32> {
    bytes.get(at..at + 4).map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
}

/// Parses an unsigned-byte IDX file into its header and payload.
pub fn parse_idx(bytes: &[u8]) -> Result<(IdxHeader, &[u8]), DataError> {
    let magic = be_u32(bytes, 0).ok_or(DataError::Truncated { expected: 4, got: bytes.len() })?;
    let rank = match magic {
        LABELS_MAGIC => 1,
        IMAGES_MAGIC => 3,
        other => return Err(DataError::BadMagic(other)),
    };
    let head = 4 + 4 * rank;
    let dims = (0..rank)
        .map(|i| be_u32(bytes, 4 + 4 * i).map(|d| d as usize))
        .collect::<Option<Vec<_>>>()
        .ok_or(DataError::Truncated { expected: head, got: bytes.len() })?;
    let header = IdxHeader { magic, dims };
    let len = header.payload_len().and_then(|n| n.checked_add(head)).ok_or(DataError::DimOverflow)?;
    if bytes.len() < len {
        return Err(DataError::Truncated { expected: len, got: bytes.len() });
    }
    Ok((header, &bytes[head..len]))
}

/// Reads a file, transparently inflating gzip.
pub fn read_maybe_gz(path: &Path) -> Result<Vec<u8>, DataError> {
    let raw = std::fs::read(path).map_err(|e| DataError::io(path, e))?;
    if raw.starts_with(&[0x1f, 0x8b]) {
        let mut out = Vec::new();
        flate2::read::GzDecoder::new(raw.as_slice()).read_to_end(&mut out).map_err(|e| DataError::io(path, e))?;
        Ok(out)
    } else {
        Ok(raw)
    }
}

pub fn images_from_idx(bytes: &[u8]) -> Result<Vec<Image>, DataError> {
    let (header, payload) = parse_idx(bytes)?;
    if header.magic != IMAGES_MAGIC {
        return Err(DataError::BadMagic(header.magic));
    }
    let (h, w) = (header.dims[1], header.dims[2]);
    if h == 0 || w == 0 {
        return Ok(Vec::new());
    }
    payload.chunks_exact(h * w).map(|px| Image::new(h, w, 1, px.to_vec())).collect()
}

pub fn labels_from_idx(bytes: &[u8]) -> Result<Vec<u8>, DataError> {
    let (header, payload) = parse_idx(bytes)?;
    if header.magic != LABELS_MAGIC {
        return Err(DataError::BadMagic(header.magic));
    }
    Ok(payload.to_vec())
}

/// Loads an image IDX file as a dataset named after the file.
pub fn load_idx(path: impl AsRef<Path>) -> Result<Dataset, DataError> {
    let path = path.as_ref();
    let images = images_from_idx(&read_maybe_gz(path)?)?;
    let name = path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
    Dataset::new(name, Split::Test, images)
}

/// Encodes images as an uncompressed IDX byte stream.
pub fn encode_idx_images(images: &[Image]) -> Result<Vec<u8>, DataError> {
    let (h, w) = images.first().map(|i| (i.height(), i.width())).unwrap_or((0, 0));
    let mut out = Vec::with_capacity(16 + images.len() * h * w);
    out.extend_from_slice(&IMAGES_MAGIC.to_be_bytes());
    for d in [images.len(), h, w] {
        out.extend_from_slice(&(d as u32).to_be_bytes());
    }
    for img in images {
        if img.resolution() != (h, w, 1) {
            return Err(DataError::MixedResolution);
        }
        out.extend_from_slice(img.pixels());
    }
    Ok(out)
}

pub fn encode_idx_labels(labels: &[u8]) -> Vec<u8> {
    let mut out = LABELS_MAGIC.to_be_bytes().to_vec();
    out.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    out.extend_from_slice(labels);
    out
}
