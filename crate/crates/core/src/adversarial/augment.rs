//! Random scale and translation of square crops, shared by real and fake branches.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::raster::Raster;

/// Ranges for the per-crop similarity transform. Applied with probability 1.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentParams {
    /// Scale factor range, sampled log-uniformly.
    pub scale: [f64; 2],
    /// Maximum shift along each axis as a fraction of the crop size.
    pub translation: f64,
}

impl Default for AugmentParams {
    fn default() -> Self {
        Self { scale: [0.8, 1.25], translation: 0.125 }
    }
}

impl AugmentParams {
    pub fn validate(&self) -> Result<()> {
        let [lo, hi] = self.scale;
        if !(lo > 0.0 && lo <= hi && hi.is_finite()) || !(self.translation >= 0.0 && self.translation < 1.0) {
            return Err(Error::Config(format!("invalid augmentation ranges {self:?}")));
        }
        Ok(())
    }

    pub fn sample(&self, rng: &mut impl Rng) -> AugmentTransform {
        let [lo, hi] = self.scale;
        let scale = (lo.ln() + rng.gen::<f64>() * (hi.ln() - lo.ln())).exp();
        let t = self.translation;
        let shift = [(2.0 * rng.gen::<f64>() - 1.0) * t, (2.0 * rng.gen::<f64>() - 1.0) * t];
        AugmentTransform { scale, shift }
    }
}

/// Zoom about the crop center by `scale`, then shift by `shift` (x, y) crop widths.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AugmentTransform {
    pub scale: f64,
    pub shift: [f64; 2],
}

/// Bilinear taps of one output pixel: up to four in-frame sources plus the
/// total weight that falls outside the frame.
struct Taps {
    src: [(usize, f64); 4],
    count: usize,
    outside: f64,
}

impl AugmentTransform {
    pub const IDENTITY: Self = Self { scale: 1.0, shift: [0.0, 0.0] };

    fn taps(&self, size: usize, y: usize, x: usize) -> Taps {
        let n = size as f64;
        let c = 0.5 * n;
        let sx = c + (x as f64 + 0.5 - c - self.shift[0] * n) / self.scale - 0.5;
        let sy = c + (y as f64 + 0.5 - c - self.shift[1] * n) / self.scale - 0.5;
        let (x0, y0) = (sx.floor(), sy.floor());
        let (tx, ty) = (sx - x0, sy - y0);
        let mut taps = Taps { src: [(0, 0.0); 4], count: 0, outside: 0.0 };
        for (dy, wy) in [(0.0, 1.0 - ty), (1.0, ty)] {
            for (dx, wx) in [(0.0, 1.0 - tx), (1.0, tx)] {
                let w = wy * wx;
                if w == 0.0 {
                    continue;
                }
                let (yy, xx) = (y0 + dy, x0 + dx);
                if yy < 0.0 || xx < 0.0 || yy >= n || xx >= n {
                    taps.outside += w;
                } else {
                    taps.src[taps.count] = (yy as usize * size + xx as usize, w);
                    taps.count += 1;
                }
            }
        }
        taps
    }

    fn check(r: &Raster, fill: &[f64]) -> Result<()> {
        if r.height() != r.width() {
            return Err(Error::invalid(format!("augmentation expects square crops, got {}x{}", r.height(), r.width())));
        }
        if fill.len() != r.channels() {
            return Err(Error::invalid(format!("{} fill values for {} channels", fill.len(), r.channels())));
        }
        Ok(())
    }

    /// Resamples `r`; samples falling outside the frame take the channel's `fill` value.
    pub fn apply(&self, r: &Raster, fill: &[f64]) -> Result<Raster> {
        Self::check(r, fill)?;
        if *self == Self::IDENTITY {
            return Ok(r.clone());
        }
        let n = r.width();
        let mut out = Raster::zeros(r.channels(), n, n);
        for y in 0..n {
            for x in 0..n {
                let taps = self.taps(n, y, x);
                for (c, f) in fill.iter().enumerate() {
                    let plane = r.plane(c);
                    let v = taps.src[..taps.count].iter().map(|(i, w)| w * plane[*i]).sum::<f64>() + taps.outside * f;
                    out.set(c, y, x, v);
                }
            }
        }
        Ok(out)
    }

    /// Transpose of [`Self::apply`] with respect to the input crop, plus the
    /// gradient with respect to each channel's fill value.
    pub fn adjoint(&self, g: &Raster) -> (Raster, Vec<f64>) {
        let n = g.width();
        if *self == Self::IDENTITY {
            return (g.clone(), vec![0.0; g.channels()]);
        }
        let mut out = Raster::zeros(g.channels(), n, n);
        let mut fill = vec![0.0; g.channels()];
        for y in 0..n {
            for x in 0..n {
                let taps = self.taps(n, y, x);
                for (c, f) in fill.iter_mut().enumerate() {
                    let gv = g.get(c, y, x);
                    let plane = &mut out.data_mut()[c * n * n..(c + 1) * n * n];
                    for (i, w) in &taps.src[..taps.count] {
                        plane[*i] += w * gv;
                    }
                    *f += taps.outside * gv;
                }
            }
        }
        (out, fill)
    }
}

/// Samples one transform and applies it to a crop.
pub fn augment(r: &Raster, fill: &[f64], params: &AugmentParams, rng: &mut impl Rng) -> Result<Raster> {
    params.validate()?;
    params.sample(rng).apply(r, fill)
}
