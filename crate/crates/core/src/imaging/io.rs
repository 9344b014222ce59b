use std::fs::File;
use std::io::BufWriter;
use std::path::Path;

use image::codecs::png::PngEncoder;
use image::codecs::pnm::{PnmEncoder, PnmSubtype, SampleEncoding};
use image::{ExtendedColorType, ImageEncoder};

use super::Image;
use crate::error::{Error, Result};

/// Reads a PNG or PPM/PGM file. Grey-level files load as one channel,
/// anything with colour as three (alpha is dropped).
pub fn read_image(path: &Path) -> Result<Image> {
    let img = image::open(path).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    if img.color().has_color() {
        Image::from_u8(h, w, 3, img.to_rgb8().as_raw())
    } else {
        Image::from_u8(h, w, 1, img.to_luma8().as_raw())
    }
}

/// Writes by extension: `.png` keeps the channel count (1, 2, 3 or 4);
/// `.ppm` is binary P6 with maxval 255, replicating grey images to RGB.
pub fn write_image(path: &Path, img: &Image) -> Result<()> {
    let ext = path
        .extension()
        .and_then(|e| e.to_str())
        .map(str::to_ascii_lowercase)
        .unwrap_or_default();
    let bytes = img.to_u8();
    let (w, h) = (img.width() as u32, img.height() as u32);
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let out = BufWriter::new(file);
    let encoded = match ext.as_str() {
        "png" => {
            let color = match img.channels() {
                1 => ExtendedColorType::L8,
                2 => ExtendedColorType::La8,
                3 => ExtendedColorType::Rgb8,
                4 => ExtendedColorType::Rgba8,
                c => {
                    return Err(Error::InvalidParam(format!(
                        "cannot write {c}-channel image as PNG"
                    )))
                }
            };
            PngEncoder::new(out).write_image(&bytes, w, h, color)
        }
        "ppm" => {
            let rgb = match img.channels() {
                1 => bytes.iter().flat_map(|&b| [b, b, b]).collect(),
                3 => bytes,
                c => {
                    return Err(Error::InvalidParam(format!(
                        "cannot write {c}-channel image as PPM"
                    )))
                }
            };
            PnmEncoder::new(out)
                .with_subtype(PnmSubtype::Pixmap(SampleEncoding::Binary))
                .write_image(&rgb, w, h, ExtendedColorType::Rgb8)
        }
        other => {
            return Err(Error::InvalidParam(format!(
                "unsupported image extension '{other}' for {}",
                path.display()
            )))
        }
    };
    encoded.map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })
}
