//! The IDX container used by the MNIST family: a big-endian magic number
//! (`0x00000803` for u8 images, `0x00000801` for u8 labels), one big-endian
//! u32 per dimension, then raw unsigned bytes.

use std::path::Path;

use crate::error::{Error, Result};

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

/// Images scaled to [0, 1], row-major per image.
#[derive(Debug, Clone, PartialEq)]
pub struct IdxImages {
    pub rows: usize,
    pub cols: usize,
    pub pixels: Vec<Vec<f32>>,
}

impl IdxImages {
    pub fn len(&self) -> usize {
        self.pixels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pixels.is_empty()
    }
}

fn read_u32_be(bytes: &[u8], offset: usize) -> Option<u32> {
    bytes
        .get(offset..offset + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
}

fn parse_header(path: &Path, bytes: &[u8], expected_magic: u32, ndim: usize) -> Result<Vec<usize>> {
    let magic = read_u32_be(bytes, 0)
        .ok_or_else(|| Error::format(path, "file shorter than the magic number"))?;
    if magic != expected_magic {
        return Err(Error::format(
            path,
            format!("unexpected magic 0x{magic:08x}, expected 0x{expected_magic:08x}"),
        ));
    }
    let dims = (0..ndim)
        .map(|i| {
            read_u32_be(bytes, 4 + 4 * i)
                .map(|d| d as usize)
                .ok_or_else(|| Error::format(path, "truncated dimension header"))
        })
        .collect::<Result<Vec<_>>>()?;
    let header = 4 + 4 * ndim;
    let expected = header + dims.iter().product::<usize>();
    if bytes.len() != expected {
        return Err(Error::format(
            path,
            format!(
                "expected {expected} bytes for dims {dims:?}, found {}",
                bytes.len()
            ),
        ));
    }
    Ok(dims)
}

pub fn load_idx_images(path: impl AsRef<Path>) -> Result<IdxImages> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let dims = parse_header(path, &bytes, IDX_IMAGES_MAGIC, 3)?;
    let (n, rows, cols) = (dims[0], dims[1], dims[2]);
    let body = &bytes[16..];
    let pixels = (0..n)
        .map(|i| {
            body[i * rows * cols..(i + 1) * rows * cols]
                .iter()
                .map(|&b| b as f32 / 255.0)
                .collect()
        })
        .collect();
    Ok(IdxImages { rows, cols, pixels })
}

pub fn load_idx_labels(path: impl AsRef<Path>) -> Result<Vec<u8>> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    parse_header(path, &bytes, IDX_LABELS_MAGIC, 1)?;
    Ok(bytes[8..].to_vec())
}

/// Encodes images (values in [0, 1]) as an IDX image file body. Values are
/// rounded to the nearest byte.
pub fn encode_idx_images(images: &IdxImages) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + images.len() * images.rows * images.cols);
    out.extend(IDX_IMAGES_MAGIC.to_be_bytes());
    for d in [images.len(), images.rows, images.cols] {
        out.extend((d as u32).to_be_bytes());
    }
    for img in &images.pixels {
        out.extend(
            img.iter()
                .map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8),
        );
    }
    out
}

pub fn encode_idx_labels(labels: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + labels.len());
    out.extend(IDX_LABELS_MAGIC.to_be_bytes());
    out.extend((labels.len() as u32).to_be_bytes());
    out.extend(labels);
    out
}

pub fn save_idx_images(images: &IdxImages, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, encode_idx_images(images)).map_err(|e| Error::io(path, e))
}

pub fn save_idx_labels(labels: &[u8], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, encode_idx_labels(labels)).map_err(|e| Error::io(path, e))
}
