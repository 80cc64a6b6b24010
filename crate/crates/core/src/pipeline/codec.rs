use std::path::Path;

use image::codecs::pnm::{PnmEncoder, PnmSubtype, SampleEncoding};
use image::{DynamicImage, ExtendedColorType, ImageEncoder, ImageFormat};

use crate::error::{Error, Result};
use crate::numerics::io::write_atomic;
use crate::numerics::Tensor;

/// 8-bit image, row-major with interleaved channels.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ImageBuffer {
    height: usize,
    width: usize,
    channels: usize,
    data: Vec<u8>,
}

impl ImageBuffer {
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<u8>) -> Result<Self> {
        if !matches!(channels, 1 | 3) {
            return Err(Error::invalid(format!("unsupported channel count {channels}")));
        }
        if height == 0 || width == 0 || data.len() != height * width * channels {
            return Err(Error::InvalidShape {
                shape: vec![height, width, channels],
                reason: format!("{} bytes of pixel data", data.len()),
            });
        }
        Ok(Self {
            height,
            width,
            channels,
            data,
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn get(&self, i: usize, j: usize, c: usize) -> u8 {
        self.data[(i * self.width + j) * self.channels + c]
    }
}

/// Maps `[0, 255]` affinely onto `[−1, 1]`.
pub fn encode(image: &ImageBuffer) -> Tensor {
    let data = image.data.iter().map(|&p| (p as f64 / 127.5 - 1.0) as f32).collect();
    Tensor::new(vec![image.height, image.width, image.channels], data).expect("pixel values are finite")
}

/// Inverse of [`encode`], rounding half away from zero and clamping.
pub fn decode(z: &Tensor) -> Result<ImageBuffer> {
    let (h, w, c) = z.dims3()?;
    z.ensure_finite("decode")?;
    let data = z
        .data()
        .iter()
        .map(|&v| ((v as f64 + 1.0) * 127.5).round().clamp(0.0, 255.0) as u8)
        .collect();
    ImageBuffer::new(h, w, c, data)
}

/// Parses a binary PGM (P5) or PPM (P6) with 8-bit samples.
pub fn read_pnm(bytes: &[u8]) -> Result<ImageBuffer> {
    if !(bytes.starts_with(b"P5") || bytes.starts_with(b"P6")) {
        return Err(Error::format("image", "expected binary PGM (P5) or PPM (P6)"));
    }
    let img = image::load_from_memory_with_format(bytes, ImageFormat::Pnm)
        .map_err(|e| Error::format("image", e.to_string()))?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    match img {
        DynamicImage::ImageLuma8(g) => ImageBuffer::new(h, w, 1, g.into_raw()),
        DynamicImage::ImageRgb8(g) => ImageBuffer::new(h, w, 3, g.into_raw()),
        _ => Err(Error::format("image", "only 8-bit samples are supported")),
    }
}

pub fn load_pnm(path: &Path) -> Result<ImageBuffer> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    read_pnm(&bytes)
}

/// Encodes as binary PGM (one channel) or PPM (three channels).
pub fn write_pnm(image: &ImageBuffer) -> Result<Vec<u8>> {
    let (subtype, color) = match image.channels {
        1 => (PnmSubtype::Graymap(SampleEncoding::Binary), ExtendedColorType::L8),
        _ => (PnmSubtype::Pixmap(SampleEncoding::Binary), ExtendedColorType::Rgb8),
    };
    let mut out = Vec::new();
    PnmEncoder::new(&mut out)
        .with_subtype(subtype)
        .write_image(&image.data, image.width as u32, image.height as u32, color)
        .map_err(|e| Error::format("image", e.to_string()))?;
    Ok(out)
}

pub fn save_pnm(path: &Path, image: &ImageBuffer) -> Result<()> {
    write_atomic(path, &write_pnm(image)?)
}
