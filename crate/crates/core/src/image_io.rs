//! PNG and binary PPM (P6) reading and writing for 8-bit RGB images.

use std::path::Path;

use image::codecs::pnm::{PnmEncoder, PnmSubtype, SampleEncoding};
use image::{ExtendedColorType, ImageEncoder, ImageFormat};

use crate::colorspace::RgbImage;
use crate::error::{Error, Result};

fn unreadable(path: &Path, reason: impl ToString) -> Error {
    Error::UnreadableImage {
        path: path.to_path_buf(),
        reason: reason.to_string(),
    }
}

/// Read a PNG or PPM file; alpha and 16-bit inputs are reduced to 8-bit RGB.
pub fn read_image(path: &Path) -> Result<RgbImage> {
    let img = image::open(path).map_err(|e| unreadable(path, e))?;
    let rgb = img.to_rgb8();
    let (w, h) = rgb.dimensions();
    RgbImage::new(w as usize, h as usize, rgb.into_raw())
}

pub fn write_png(img: &RgbImage, path: &Path) -> Result<()> {
    image::save_buffer_with_format(
        path,
        img.data(),
        img.width() as u32,
        img.height() as u32,
        ExtendedColorType::Rgb8,
        ImageFormat::Png,
    )
    .map_err(|e| Error::Io(std::io::Error::other(e)))
}

pub fn write_ppm(img: &RgbImage, path: &Path) -> Result<()> {
    let file = std::io::BufWriter::new(std::fs::File::create(path)?);
    PnmEncoder::new(file)
        .with_subtype(PnmSubtype::Pixmap(SampleEncoding::Binary))
        .write_image(img.data(), img.width() as u32, img.height() as u32, ExtendedColorType::Rgb8)
        .map_err(|e| Error::Io(std::io::Error::other(e)))
}

/// Write by extension: `.ppm` gives P6, anything else PNG.
pub fn write_image(img: &RgbImage, path: &Path) -> Result<()> {
    match path.extension().and_then(|e| e.to_str()) {
        Some(ext) if ext.eq_ignore_ascii_case("ppm") => write_ppm(img, path),
        _ => write_png(img, path),
    }
}

pub fn is_image_path(path: &Path) -> bool {
    matches!(
        path.extension().and_then(|e| e.to_str()).map(|e| e.to_ascii_lowercase()).as_deref(),
        Some("png" | "ppm")
    )
}
