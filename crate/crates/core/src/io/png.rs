//! 8-bit PNG images. Bytes map to `v / 255` with no gamma transform.

use std::path::Path;

use image::{ColorType, DynamicImage, ImageFormat};

use crate::error::{Error, Result};
use crate::image::ImageF;

fn decode(img: DynamicImage) -> Result<ImageF> {
    let (w, h) = (img.width() as usize, img.height() as usize);
    let (channels, bytes) = match img.color() {
        ColorType::L8 => (1, img.into_luma8().into_raw()),
        ColorType::La8 => (1, img.into_luma8().into_raw()),
        ColorType::Rgb8 => (3, img.into_rgb8().into_raw()),
        ColorType::Rgba8 => (3, img.into_rgb8().into_raw()),
        other => {
            return Err(Error::UnsupportedImage(format!(
                "{other:?}; only 8-bit images are supported"
            )))
        }
    };
    ImageF::from_vec(h, w, channels, bytes.into_iter().map(|b| b as f64 / 255.0).collect())
}

pub fn decode_png(bytes: &[u8]) -> Result<ImageF> {
    decode(image::load_from_memory_with_format(bytes, ImageFormat::Png)?)
}

pub fn load_image(path: impl AsRef<Path>) -> Result<ImageF> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_png(&bytes)
}

/// `round(clamp(v, 0, 1) · 255)` with halves rounded up.
pub fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0 + 0.5).floor() as u8
}

pub fn encode_png(img: &ImageF) -> Result<Vec<u8>> {
    let bytes: Vec<u8> = img.data().iter().map(|&v| quantize(v)).collect();
    let (w, h) = (img.width() as u32, img.height() as u32);
    let dynamic = match img.channels() {
        1 => DynamicImage::ImageLuma8(image::GrayImage::from_raw(w, h, bytes).expect("sized buffer")),
        3 => DynamicImage::ImageRgb8(image::RgbImage::from_raw(w, h, bytes).expect("sized buffer")),
        c => return Err(Error::UnsupportedImage(format!("{c} channels"))),
    };
    let mut out = std::io::Cursor::new(Vec::new());
    dynamic.write_to(&mut out, ImageFormat::Png)?;
    Ok(out.into_inner())
}

pub fn save_image(img: &ImageF, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, encode_png(img)?).map_err(|e| Error::io(path, e))
}
