//! Planar float images in channel-major (CHW) layout.

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Raster {
    channels: usize,
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl Raster {
    pub fn new(channels: usize, height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != channels * height * width {
            return Err(Error::invalid(format!(
                "raster {channels}x{height}x{width} needs {} values, got {}",
                channels * height * width,
                data.len()
            )));
        }
        Ok(Self { channels, height, width, data })
    }

    pub fn zeros(channels: usize, height: usize, width: usize) -> Self {
        Self { channels, height, width, data: vec![0.0; channels * height * width] }
    }

    pub fn filled(channels: usize, height: usize, width: usize, value: f64) -> Self {
        Self { channels, height, width, data: vec![value; channels * height * width] }
    }

    pub fn from_fn(channels: usize, height: usize, width: usize, mut f: impl FnMut(usize, usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(channels * height * width);
        for c in 0..channels {
            for y in 0..height {
                for x in 0..width {
                    data.push(f(c, y, x));
                }
            }
        }
        Self { channels, height, width, data }
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        (self.channels, self.height, self.width)
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn index(&self, c: usize, y: usize, x: usize) -> usize {
        (c * self.height + y) * self.width + x
    }

    #[inline]
    pub fn get(&self, c: usize, y: usize, x: usize) -> f64 {
        self.data[self.index(c, y, x)]
    }

    #[inline]
    pub fn set(&mut self, c: usize, y: usize, x: usize, v: f64) {
        let i = self.index(c, y, x);
        self.data[i] = v;
    }

    pub fn plane(&self, c: usize) -> &[f64] {
        let n = self.height * self.width;
        &self.data[c * n..(c + 1) * n]
    }

    pub fn channel(&self, c: usize) -> Raster {
        Raster { channels: 1, height: self.height, width: self.width, data: self.plane(c).to_vec() }
    }

    pub fn same_shape(&self, other: &Raster) -> Result<()> {
        if self.dims() == other.dims() {
            Ok(())
        } else {
            Err(Error::invalid(format!("raster shapes {:?} and {:?} differ", self.dims(), other.dims())))
        }
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Raster {
        Raster { data: self.data.iter().map(|v| f(*v)).collect(), ..self.clone() }
    }

    /// Bilinear sample at continuous pixel coordinates (pixel centers at `+0.5`),
    /// returning `fill` outside the image.
    pub fn bilinear(&self, c: usize, y: f64, x: f64, fill: f64) -> f64 {
        let (fy, fx) = (y - 0.5, x - 0.5);
        let (y0, x0) = (fy.floor(), fx.floor());
        let (ty, tx) = (fy - y0, fx - x0);
        let tap = |yy: f64, xx: f64| {
            if yy < 0.0 || xx < 0.0 || yy >= self.height as f64 || xx >= self.width as f64 {
                fill
            } else {
                self.get(c, yy as usize, xx as usize)
            }
        };
        let top = tap(y0, x0) * (1.0 - tx) + tap(y0, x0 + 1.0) * tx;
        let bottom = tap(y0 + 1.0, x0) * (1.0 - tx) + tap(y0 + 1.0, x0 + 1.0) * tx;
        top * (1.0 - ty) + bottom * ty
    }

    /// Bilinear resample of a square/rectangular window onto a `size x size` grid.
    ///
    /// The window is `[x0, x0 + side) x [y0, y0 + side)` in continuous pixel units.
    pub fn resample_window(&self, x0: f64, y0: f64, side: f64, size: usize, fill: f64) -> Raster {
        let step = side / size as f64;
        Raster::from_fn(self.channels, size, size, |c, y, x| {
            self.bilinear(c, y0 + (y as f64 + 0.5) * step, x0 + (x as f64 + 0.5) * step, fill)
        })
    }

    /// Box-filtered downsample by an integer factor (edges truncated).
    pub fn downsample(&self, factor: usize) -> Raster {
        let (h, w) = (self.height / factor, self.width / factor);
        let norm = (factor * factor) as f64;
        Raster::from_fn(self.channels, h, w, |c, y, x| {
            let mut acc = 0.0;
            for dy in 0..factor {
                for dx in 0..factor {
                    acc += self.get(c, y * factor + dy, x * factor + dx);
                }
            }
            acc / norm
        })
    }
}
