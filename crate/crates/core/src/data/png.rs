//! PNG reading and writing for the formats the pipeline uses: 8-bit RGB,
//! 8-bit grayscale and 16-bit grayscale.

use std::path::Path;

use image::{ColorType, DynamicImage, ImageFormat};

use crate::error::{Error, Result};
use crate::gradfield::ColorImage;

fn format_err(path: &Path, msg: impl Into<String>) -> Error {
    Error::Format { path: path.to_path_buf(), msg: msg.into() }
}

fn open(path: &Path) -> Result<DynamicImage> {
    let mut reader = image::ImageReader::open(path).map_err(|e| Error::io(path, e))?;
    reader.set_format(ImageFormat::Png);
    reader.decode().map_err(|e| match e {
        image::ImageError::IoError(io) => Error::io(path, io),
        other => format_err(path, other.to_string()),
    })
}

/// 8-bit RGB (alpha, if present, is dropped) scaled to `[0,1]`.
pub fn read_rgb(path: &Path) -> Result<ColorImage> {
    let img = open(path)?;
    if !matches!(img.color(), ColorType::Rgb8 | ColorType::Rgba8) {
        return Err(format_err(path, format!("expected 8-bit RGB, found {:?}", img.color())));
    }
    let rgb = img.to_rgb8();
    let (w, h) = (rgb.width() as usize, rgb.height() as usize);
    let raw = rgb.as_raw();
    let mut data = vec![0.0; 3 * h * w];
    for (i, px) in raw.chunks_exact(3).enumerate() {
        for c in 0..3 {
            data[c * h * w + i] = f64::from(px[c]) / 255.0;
        }
    }
    ColorImage::new(3, h, w, data)
}

/// 16-bit single-channel image as `(height, width, raw values)`.
pub fn read_gray16(path: &Path) -> Result<(usize, usize, Vec<u16>)> {
    let img = open(path)?;
    match img {
        DynamicImage::ImageLuma16(buf) => {
            let (w, h) = (buf.width() as usize, buf.height() as usize);
            Ok((h, w, buf.into_raw()))
        }
        other => Err(format_err(path, format!("expected 16-bit grayscale, found {:?}", other.color()))),
    }
}

fn save(path: &Path, bytes: &[u8], w: usize, h: usize, color: image::ExtendedColorType) -> Result<()> {
    image::save_buffer_with_format(path, bytes, w as u32, h as u32, color, ImageFormat::Png).map_err(|e| match e {
        image::ImageError::IoError(io) => Error::io(path, io),
        other => format_err(path, other.to_string()),
    })
}

/// Writes a 3-channel image, rounding to 8 bits.
pub fn write_rgb(path: &Path, img: &ColorImage) -> Result<()> {
    if img.channels() != 3 {
        return Err(Error::dim(format!("RGB output needs 3 channels, got {}", img.channels())));
    }
    let (h, w) = (img.height(), img.width());
    let plane = h * w;
    let mut bytes = Vec::with_capacity(3 * plane);
    for i in 0..plane {
        for c in 0..3 {
            bytes.push((img.data()[c * plane + i] * 255.0).round().clamp(0.0, 255.0) as u8);
        }
    }
    save(path, &bytes, w, h, image::ExtendedColorType::Rgb8)
}

pub fn write_gray8(path: &Path, height: usize, width: usize, pixels: &[u8]) -> Result<()> {
    save(path, pixels, width, height, image::ExtendedColorType::L8)
}

pub fn write_gray16(path: &Path, height: usize, width: usize, pixels: &[u16]) -> Result<()> {
    let bytes: Vec<u8> = pixels.iter().flat_map(|v| v.to_ne_bytes()).collect();
    save(path, &bytes, width, height, image::ExtendedColorType::L16)
}
