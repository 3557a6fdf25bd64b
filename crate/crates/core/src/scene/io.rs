//! 8-bit PNG and 16-bit PGM reading and writing for rasters with values in `[0, 1]`.

use std::path::Path;

use image::{ImageBuffer, Luma, Rgb};

use crate::error::{Error, Result};
use crate::raster::Raster;

fn image_err(path: &Path, e: image::ImageError) -> Error {
    Error::Image { path: path.to_path_buf(), message: e.to_string() }
}

fn to_u8(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Reads a PNG as a 3-channel raster in `[0, 1]` (grayscale is replicated, alpha dropped).
pub fn load_rgb(path: &Path) -> Result<Raster> {
    let img = image::open(path).map_err(|e| image_err(path, e))?.to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    Ok(Raster::from_fn(3, h, w, |c, y, x| img.get_pixel(x as u32, y as u32)[c] as f64 / 255.0))
}

/// Reads a PNG as a single-channel raster in `[0, 1]` (color is converted to luma).
pub fn load_gray(path: &Path) -> Result<Raster> {
    let img = image::open(path).map_err(|e| image_err(path, e))?.to_luma8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    Ok(Raster::from_fn(1, h, w, |_, y, x| img.get_pixel(x as u32, y as u32)[0] as f64 / 255.0))
}

/// Writes a 1- or 3-channel raster as an 8-bit PNG, clamping to `[0, 1]`.
pub fn save_png(r: &Raster, path: &Path) -> Result<()> {
    let (w, h) = (r.width() as u32, r.height() as u32);
    let res = match r.channels() {
        1 => ImageBuffer::from_fn(w, h, |x, y| Luma([to_u8(r.get(0, y as usize, x as usize))])).save(path),
        3 => ImageBuffer::from_fn(w, h, |x, y| Rgb(std::array::from_fn(|c| to_u8(r.get(c, y as usize, x as usize)))))
            .save(path),
        c => return Err(Error::invalid(format!("cannot write a {c}-channel raster as PNG"))),
    };
    res.map_err(|e| image_err(path, e))
}

/// Writes `round(value * scale)` as a 16-bit binary PGM; values must fit in `[0, 65535 / scale]`.
pub fn save_pgm16(r: &Raster, scale: f64, path: &Path) -> Result<()> {
    if r.channels() != 1 {
        return Err(Error::invalid("16-bit PGM holds a single channel"));
    }
    let limit = u16::MAX as f64;
    if let Some(v) = r.data().iter().find(|&&v| !(v * scale >= 0.0 && (v * scale).round() <= limit)) {
        return Err(Error::invalid(format!("value {v} does not fit a 16-bit PGM at scale {scale}")));
    }
    // The image crate's PNM encoder has no 16-bit path; P5 is a text header plus big-endian samples.
    let mut bytes = format!("P5\n{} {}\n65535\n", r.width(), r.height()).into_bytes();
    for v in r.data() {
        bytes.extend_from_slice(&((v * scale).round() as u16).to_be_bytes());
    }
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Reads a 16-bit PGM written by [`save_pgm16`], dividing by `scale`.
pub fn load_pgm16(path: &Path, scale: f64) -> Result<Raster> {
    let img = image::open(path).map_err(|e| image_err(path, e))?.to_luma16();
    let (w, h) = (img.width() as usize, img.height() as usize);
    Ok(Raster::from_fn(1, h, w, |_, y, x| img.get_pixel(x as u32, y as u32)[0] as f64 / scale))
}
