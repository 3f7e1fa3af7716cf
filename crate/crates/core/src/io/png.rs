use std::path::{Path, PathBuf};

use image::{ColorType, ImageBuffer, ImageFormat, Luma};

use crate::stain::{DensityMap, RgbImage};
use crate::{Error, Result};

/// Density units per 16-bit level in density PNGs (max representable 6.5535).
pub const DENSITY_PNG_SCALE: f64 = 1e-4;

/// Reads an 8-bit PNG as RGB. Gray and alpha variants are converted; 16-bit
/// images are rejected.
pub fn read_png(path: &Path) -> Result<RgbImage> {
    let img = image::open(path)?;
    match img.color() {
        ColorType::L8 | ColorType::La8 | ColorType::Rgb8 | ColorType::Rgba8 => {}
        other => {
            return Err(Error::InvalidArgument(format!(
                "{}: expected an 8-bit PNG, got {other:?}",
                path.display()
            )))
        }
    }
    let rgb = img.to_rgb8();
    RgbImage::new(rgb.width() as usize, rgb.height() as usize, rgb.into_raw())
}

pub fn write_png(path: &Path, img: &RgbImage) -> Result<()> {
    let buf = image::RgbImage::from_raw(
        img.width() as u32,
        img.height() as u32,
        img.pixels().to_vec(),
    )
    .expect("pixel buffer matches dimensions");
    buf.save_with_format(path, ImageFormat::Png)?;
    Ok(())
}

/// `*.png` files directly inside `dir`, sorted by file name.
pub fn list_pngs(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for entry in std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        let is_png = path
            .extension()
            .is_some_and(|e| e.eq_ignore_ascii_case("png"));
        if is_png && path.is_file() {
            out.push(path);
        }
    }
    out.sort();
    Ok(out)
}

/// Every PNG in `dir` with its file stem, in file-name order.
pub fn read_png_dir(dir: &Path) -> Result<Vec<(String, RgbImage)>> {
    list_pngs(dir)?
        .into_iter()
        .map(|p| {
            let stem = p
                .file_stem()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_default();
            Ok((stem, read_png(&p)?))
        })
        .collect()
}

/// Writes one density row as a 16-bit grayscale PNG, `level = round(h / DENSITY_PNG_SCALE)`.
pub fn write_density_png(
    path: &Path,
    density: &DensityMap,
    stain: usize,
    width: usize,
    height: usize,
) -> Result<()> {
    if width * height != density.cols() || stain >= density.rows() {
        return Err(Error::Shape(format!(
            "density map {}x{} cannot be written as stain {stain} of a {width}x{height} image",
            density.rows(),
            density.cols()
        )));
    }
    let levels: Vec<u16> = density
        .row(stain)
        .iter()
        .map(|v| (v / DENSITY_PNG_SCALE).round().clamp(0.0, u16::MAX as f64) as u16)
        .collect();
    let buf: ImageBuffer<Luma<u16>, Vec<u16>> =
        ImageBuffer::from_raw(width as u32, height as u32, levels).expect("sized buffer");
    buf.save_with_format(path, ImageFormat::Png)?;
    Ok(())
}

/// Reads a 16-bit density PNG back into density units.
pub fn read_density_png(path: &Path) -> Result<Vec<f64>> {
    let img = image::open(path)?;
    if img.color() != ColorType::L16 {
        return Err(Error::InvalidArgument(format!(
            "{}: expected a 16-bit grayscale PNG, got {:?}",
            path.display(),
            img.color()
        )));
    }
    Ok(img
        .to_luma16()
        .into_raw()
        .into_iter()
        .map(|v| v as f64 * DENSITY_PNG_SCALE)
        .collect())
}
