use serde::{Deserialize, Serialize};

use super::pose::PoseSample;
use crate::error::{Error, Result};

/// Pinhole camera at the origin looking down +z (x right, y down).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Camera {
    /// Vertical field of view in degrees.
    pub fov_deg: f64,
    pub width: usize,
    pub height: usize,
}

impl Default for Camera {
    fn default() -> Self {
        Self { fov_deg: 10.0, width: 128, height: 128 }
    }
}

impl Camera {
    pub fn validate(&self) -> Result<()> {
        if !(self.fov_deg > 0.0 && self.fov_deg < 180.0) || self.width == 0 || self.height == 0 {
            return Err(Error::Config(format!("invalid camera {self:?}")));
        }
        Ok(())
    }

    /// Focal length in pixels.
    pub fn focal(&self) -> f64 {
        0.5 * self.height as f64 / (0.5 * self.fov_deg.to_radians()).tan()
    }

    pub fn principal_point(&self) -> (f64, f64) {
        (0.5 * self.width as f64, 0.5 * self.height as f64)
    }

    /// Unit camera-frame direction through continuous pixel coordinates `(u, v)`.
    pub fn direction(&self, u: f64, v: f64) -> [f64; 3] {
        let f = self.focal();
        let (cx, cy) = self.principal_point();
        let d = [(u - cx) / f, (v - cy) / f, 1.0];
        let n = (d[0] * d[0] + d[1] * d[1] + 1.0).sqrt();
        d.map(|x| x / n)
    }

    /// Continuous pixel coordinates of a camera-frame point in front of the camera.
    pub fn project(&self, p: [f64; 3]) -> (f64, f64) {
        let f = self.focal();
        let (cx, cy) = self.principal_point();
        (f * p[0] / p[2] + cx, f * p[1] / p[2] + cy)
    }
}

/// Integer pixel rectangle `[x0, x1) x [y0, y1)` in full-frame coordinates.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CropWindow {
    pub x0: i64,
    pub y0: i64,
    pub x1: i64,
    pub y1: i64,
}

impl CropWindow {
    pub fn width(&self) -> i64 {
        self.x1 - self.x0
    }

    pub fn height(&self) -> i64 {
        self.y1 - self.y0
    }

    /// Square region `(x0, y0, side)` sharing the rectangle's center, side = longer edge.
    pub fn square(&self) -> (f64, f64, f64) {
        let side = self.width().max(self.height()) as f64;
        let cx = 0.5 * (self.x0 + self.x1) as f64;
        let cy = 0.5 * (self.y0 + self.y1) as f64;
        (cx - 0.5 * side, cy - 0.5 * side, side)
    }

    pub fn inside(&self, camera: &Camera) -> bool {
        self.x0 >= 0 && self.y0 >= 0 && self.x1 <= camera.width as i64 && self.y1 <= camera.height as i64
    }
}

/// Extreme slopes `m = x/z` of planes through the origin tangent to a sphere.
fn tangent_slopes(c_lat: f64, c_z: f64, radius: f64) -> (f64, f64) {
    let denom = c_z * c_z - radius * radius;
    let root = radius * (c_lat * c_lat + c_z * c_z - radius * radius).sqrt();
    ((c_lat * c_z - root) / denom, (c_lat * c_z + root) / denom)
}

/// Bounding box of the projected sphere of `radius` around the object center,
/// rounded outward to whole pixels.
pub fn crop_window_for_radius(pose: &PoseSample, camera: &Camera, radius: f64) -> Result<CropWindow> {
    let c = pose.translation;
    if !(c[2] > radius) {
        return Err(Error::invalid(format!(
            "bounding sphere at depth {} with radius {radius} is not in front of the camera",
            c[2]
        )));
    }
    let f = camera.focal();
    let (px, py) = camera.principal_point();
    let (mx0, mx1) = tangent_slopes(c[0], c[2], radius);
    let (my0, my1) = tangent_slopes(c[1], c[2], radius);
    Ok(CropWindow {
        x0: (f * mx0 + px).floor() as i64,
        x1: (f * mx1 + px).ceil() as i64,
        y0: (f * my0 + py).floor() as i64,
        y1: (f * my1 + py).ceil() as i64,
    })
}

/// Bounding box of the projected unit sphere co-centered with the object.
pub fn crop_window(pose: &PoseSample, camera: &Camera) -> Result<CropWindow> {
    crop_window_for_radius(pose, camera, 1.0)
}
