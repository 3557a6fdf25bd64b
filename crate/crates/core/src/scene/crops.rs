//! Square instance crops of a scene and background compositing.

use super::components::InstanceMask;
use crate::error::{Error, Result};
use crate::raster::Raster;

/// Per-instance crops sharing one square window size, resampled to `resolution`.
#[derive(Clone, Debug, PartialEq)]
pub struct CropSet {
    /// Masked RGB crops `I ⊙ M_k`, zero outside the mask.
    pub images: Vec<Raster>,
    pub masks: Vec<Raster>,
    /// Window side in scene pixels before resampling.
    pub side: usize,
    /// Top-left scene pixel of each window (may be negative: zero padded).
    pub origins: Vec<(i64, i64)>,
    pub resolution: usize,
}

impl CropSet {
    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }
}

fn window(r: &Raster, x0: i64, y0: i64, side: usize) -> Raster {
    Raster::from_fn(r.channels(), side, side, |c, y, x| {
        let (sy, sx) = (y0 + y as i64, x0 + x as i64);
        if sy < 0 || sx < 0 || sy >= r.height() as i64 || sx >= r.width() as i64 {
            0.0
        } else {
            r.get(c, sy as usize, sx as usize)
        }
    })
}

/// Crops every instance with a window of the largest bounding-box side,
/// centered on its own box, and resamples bilinearly to `resolution`.
pub fn extract_crops(rgb: &Raster, masks: &[InstanceMask], resolution: usize) -> Result<CropSet> {
    if masks.is_empty() || resolution == 0 {
        return Err(Error::invalid("crop extraction needs at least one mask and a positive resolution"));
    }
    for m in masks {
        if m.mask.height() != rgb.height() || m.mask.width() != rgb.width() {
            return Err(Error::invalid("instance mask and image sizes differ"));
        }
    }
    let side = masks.iter().map(|m| m.bbox.side()).max().expect("nonempty");
    let mut set = CropSet { images: Vec::new(), masks: Vec::new(), side, origins: Vec::new(), resolution };
    for m in masks {
        let x0 = m.bbox.x0 as i64 + (m.bbox.width() as i64 - side as i64).div_euclid(2);
        let y0 = m.bbox.y0 as i64 + (m.bbox.height() as i64 - side as i64).div_euclid(2);
        let mk = window(&m.mask, x0, y0, side);
        let img = window(rgb, x0, y0, side);
        let masked = Raster::from_fn(3, side, side, |c, y, x| img.get(c, y, x) * mk.get(0, y, x));
        let (img, mk) = if side == resolution {
            (masked, mk)
        } else {
            let s = side as f64;
            (masked.resample_window(0.0, 0.0, s, resolution, 0.0), mk.resample_window(0.0, 0.0, s, resolution, 0.0))
        };
        set.images.push(img);
        set.masks.push(mk);
        set.origins.push((x0, y0));
    }
    Ok(set)
}

/// `crop + (1 - mask) · color` per channel, for a crop premultiplied by its mask.
pub fn composite_background(crop: &Raster, mask: &Raster, color: [f64; 3]) -> Result<Raster> {
    if crop.channels() != 3 || mask.channels() != 1 || crop.height() != mask.height() || crop.width() != mask.width() {
        return Err(Error::invalid("background compositing needs an RGB crop and a matching mask"));
    }
    Ok(Raster::from_fn(3, crop.height(), crop.width(), |c, y, x| {
        crop.get(c, y, x) + (1.0 - mask.get(0, y, x)) * color[c]
    }))
}
