//! IDX binary format (the MNIST container): big-endian header, `u8` payload.

use std::fs;
use std::path::Path;

use byteorder::{BigEndian, ByteOrder};
use ndarray::Array2;

use super::Dataset;
use crate::error::{Error, Result};
use crate::trainer::SampleShape;

const IMAGES_MAGIC: u32 = 0x0000_0803;
const LABELS_MAGIC: u32 = 0x0000_0801;

fn header(bytes: &[u8], words: usize, what: &str) -> Result<Vec<u32>> {
    if bytes.len() < 4 * words {
        return Err(Error::format(format!("truncated {what} header")));
    }
    Ok((0..words).map(|i| BigEndian::read_u32(&bytes[4 * i..])).collect())
}

/// Parses an image file into `(pixels scaled to [0, 1], rows, cols)`.
pub fn parse_idx_images(bytes: &[u8]) -> Result<(Array2<f32>, usize, usize)> {
    let h = header(bytes, 4, "IDX image")?;
    if h[0] != IMAGES_MAGIC {
        return Err(Error::format(format!("bad IDX image magic {:#010x}", h[0])));
    }
    let (n, rows, cols) = (h[1] as usize, h[2] as usize, h[3] as usize);
    let pixels = rows * cols;
    let body = &bytes[16..];
    let need = n
        .checked_mul(pixels)
        .ok_or_else(|| Error::format("IDX image dimensions overflow"))?;
    if body.len() < need {
        return Err(Error::format(format!("truncated IDX image payload: {} of {need} bytes", body.len())));
    }
    if body.len() > need {
        return Err(Error::format(format!("{} trailing bytes after IDX image payload", body.len() - need)));
    }
    let data: Vec<f32> = body.iter().map(|&b| b as f32 / 255.0).collect();
    let images = Array2::from_shape_vec((n, pixels), data).expect("length checked");
    Ok((images, rows, cols))
}

pub fn parse_idx_labels(bytes: &[u8]) -> Result<Vec<usize>> {
    let h = header(bytes, 2, "IDX label")?;
    if h[0] != LABELS_MAGIC {
        return Err(Error::format(format!("bad IDX label magic {:#010x}", h[0])));
    }
    let n = h[1] as usize;
    let body = &bytes[8..];
    if body.len() < n {
        return Err(Error::format(format!("truncated IDX label payload: {} of {n} bytes", body.len())));
    }
    if body.len() > n {
        return Err(Error::format(format!("{} trailing bytes after IDX label payload", body.len() - n)));
    }
    Ok(body.iter().map(|&b| b as usize).collect())
}

pub fn load_idx(images_path: &Path, labels_path: Option<&Path>) -> Result<Dataset> {
    let (samples, rows, cols) = parse_idx_images(&fs::read(images_path)?)?;
    let labels = labels_path.map(fs::read).transpose()?.map(|b| parse_idx_labels(&b)).transpose()?;
    let class_count = match &labels {
        Some(l) => {
            if l.len() != samples.nrows() {
                return Err(Error::format(format!("{} images but {} labels", samples.nrows(), l.len())));
            }
            l.iter().max().map_or(0, |&m| m + 1)
        }
        None => 0,
    };
    Dataset::new(samples, labels, class_count, SampleShape::Image { rows, cols })
}

pub fn write_idx_images(images: &[Vec<u8>], rows: usize, cols: usize) -> Vec<u8> {
    let mut out = vec![0u8; 16];
    BigEndian::write_u32(&mut out[0..], IMAGES_MAGIC);
    BigEndian::write_u32(&mut out[4..], images.len() as u32);
    BigEndian::write_u32(&mut out[8..], rows as u32);
    BigEndian::write_u32(&mut out[12..], cols as u32);
    for img in images {
        assert_eq!(img.len(), rows * cols, "image size mismatch");
        out.extend_from_slice(img);
    }
    out
}

pub fn write_idx_labels(labels: &[u8]) -> Vec<u8> {
    let mut out = vec![0u8; 8];
    BigEndian::write_u32(&mut out[0..], LABELS_MAGIC);
    BigEndian::write_u32(&mut out[4..], labels.len() as u32);
    out.extend_from_slice(labels);
    out
}
