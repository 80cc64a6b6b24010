use std::path::Path;

use image::{DynamicImage, ImageFormat};

use crate::error::{Error, Result};
use crate::masks::{BinaryMask, SoftMask};
use crate::numerics::io::write_atomic;
use crate::numerics::Tensor;

/// Parses a binary (P5) PGM whose pixels are all 0 or 255.
pub fn read_binary_pgm(bytes: &[u8]) -> Result<BinaryMask> {
    if !bytes.starts_with(b"P5") {
        return Err(Error::format("mask", "expected a binary PGM (P5)"));
    }
    let img = image::load_from_memory_with_format(bytes, ImageFormat::Pnm)
        .map_err(|e| Error::format("mask", e.to_string()))?;
    let DynamicImage::ImageLuma8(gray) = img else {
        return Err(Error::format("mask", "mask must be 8-bit grayscale"));
    };
    let (w, h) = gray.dimensions();
    let mut data = Vec::with_capacity(gray.len());
    for &p in gray.as_raw() {
        data.push(match p {
            0 => 0.0,
            255 => 1.0,
            v => return Err(Error::format("mask", format!("pixel value {v} is neither 0 nor 255"))),
        });
    }
    let mask = BinaryMask::new(Tensor::new(vec![h as usize, w as usize], data)?)?;
    if mask.is_degenerate() {
        log::warn!("mask is {}", if mask.count() == 0 { "empty" } else { "full" });
    }
    Ok(mask)
}

pub fn load_binary_pgm(path: &Path) -> Result<BinaryMask> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    read_binary_pgm(&bytes)
}

/// Encodes a soft mask as a 16-bit big-endian PGM scaled by 65535. The
/// `image` PNM encoder has no 16-bit grayscale path, so the few header bytes
/// are written here.
pub fn write_soft_pgm(mask: &SoftMask) -> Vec<u8> {
    let (h, w) = mask.dims();
    let mut out = format!("P5\n{w} {h}\n65535\n").into_bytes();
    for &v in mask.field().data() {
        out.extend_from_slice(&((v as f64 * 65535.0).round() as u16).to_be_bytes());
    }
    out
}

pub fn save_soft_pgm(path: &Path, mask: &SoftMask) -> Result<()> {
    write_atomic(path, &write_soft_pgm(mask))
}
