use nalgebra::{Matrix3, Rotation3, Unit, Vector3};
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::camera::{crop_window, Camera};
use crate::error::{Error, Result};

/// Rigid transform taking camera-frame points to the object frame:
/// `x_obj = R (x_cam - t)`, so `t` is the object center in camera coordinates.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PoseSample {
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
}

impl PoseSample {
    /// Builds a pose from a row-major rotation, checking orthonormality and handedness.
    pub fn from_parts(rows: [[f64; 3]; 3], translation: [f64; 3]) -> Result<Self> {
        let rotation = Matrix3::from_fn(|i, j| rows[i][j]);
        let pose = Self { rotation, translation: Vector3::from(translation) };
        pose.check()?;
        Ok(pose)
    }

    pub fn check(&self) -> Result<()> {
        let dev = orthonormality_error(&self.rotation);
        if dev > 1e-9 || (self.rotation.determinant() - 1.0).abs() > 1e-9 {
            return Err(Error::invalid(format!("pose rotation is not a proper rotation (deviation {dev:e})")));
        }
        if !self.translation.iter().all(|v| v.is_finite()) {
            return Err(Error::invalid("pose translation is not finite"));
        }
        Ok(())
    }

    pub fn to_object(&self, p: [f64; 3]) -> [f64; 3] {
        let v = self.rotation * (Vector3::from(p) - self.translation);
        [v[0], v[1], v[2]]
    }

    pub fn direction_to_object(&self, d: [f64; 3]) -> [f64; 3] {
        let v = self.rotation * Vector3::from(d);
        [v[0], v[1], v[2]]
    }

    /// Rotates the whole placement about the optical axis by `angle` (radians,
    /// positive turns image +x towards image +y).
    pub fn rolled_about_optical_axis(&self, angle: f64) -> Self {
        let q = Rotation3::from_axis_angle(&Vector3::z_axis(), angle).into_inner();
        Self { rotation: self.rotation * q.transpose(), translation: q * self.translation }
    }

    /// Row-major `[R | t]` as 12 numbers.
    pub fn to_rows(&self) -> [f64; 12] {
        let mut out = [0.0; 12];
        for i in 0..3 {
            for j in 0..3 {
                out[4 * i + j] = self.rotation[(i, j)];
            }
            out[4 * i + 3] = self.translation[i];
        }
        out
    }

    pub fn from_rows(v: &[f64]) -> Result<Self> {
        if v.len() != 12 {
            return Err(Error::invalid(format!("pose needs 12 numbers, got {}", v.len())));
        }
        let rows = std::array::from_fn(|i| [v[4 * i], v[4 * i + 1], v[4 * i + 2]]);
        Self::from_parts(rows, [v[3], v[7], v[11]])
    }
}

pub fn orthonormality_error(r: &Matrix3<f64>) -> f64 {
    (r.transpose() * r - Matrix3::identity()).abs().max()
}

/// Angle in degrees of the relative rotation `R1ᵀ R2`.
pub fn geodesic_deg(a: &Matrix3<f64>, b: &Matrix3<f64>) -> f64 {
    let c = (((a.transpose() * b).trace() - 1.0) * 0.5).clamp(-1.0, 1.0);
    c.acos().to_degrees()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PriorKind {
    /// Viewpoints on a sphere around each instance; elevation and azimuth are
    /// measured along the actual line of sight.
    Sphere,
    /// Instances resting on a common plane, all oriented relative to the optical
    /// axis, so off-center instances are seen slightly obliquely.
    Plane,
}

/// Distribution over instance placements.
///
/// The object's up axis is `-y` (image up at zero angles) and its ground plane
/// is `y = 0`. Angles are in degrees; each range is `[lo, hi]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PosePrior {
    pub kind: PriorKind,
    pub elevation_deg: [f64; 2],
    pub azimuth_deg: [f64; 2],
    pub inplane_deg: [f64; 2],
    /// Object-center depth along the optical axis.
    pub distance: [f64; 2],
    /// Offset of the object center along camera x and y.
    pub lateral: [f64; 2],
}

impl Default for PosePrior {
    fn default() -> Self {
        Self {
            kind: PriorKind::Sphere,
            elevation_deg: [45.0, 45.0],
            azimuth_deg: [0.0, 360.0],
            inplane_deg: [0.0, 0.0],
            distance: [12.0, 12.0],
            lateral: [0.0, 0.0],
        }
    }
}

const MAX_REJECTIONS: usize = 1000;

fn draw(rng: &mut impl Rng, [lo, hi]: [f64; 2]) -> f64 {
    lo + rng.gen::<f64>() * (hi - lo)
}

impl PosePrior {
    pub fn validate(&self) -> Result<()> {
        let ranges = [
            ("elevation_deg", self.elevation_deg),
            ("azimuth_deg", self.azimuth_deg),
            ("inplane_deg", self.inplane_deg),
            ("distance", self.distance),
            ("lateral", self.lateral),
        ];
        for (name, [lo, hi]) in ranges {
            if !(lo.is_finite() && hi.is_finite() && lo <= hi) {
                return Err(Error::Config(format!("pose prior range {name} = [{lo}, {hi}] is empty")));
            }
        }
        if self.distance[0] <= 1.0 {
            return Err(Error::Config("pose prior distance must keep the unit sphere in front of the camera".into()));
        }
        if self.elevation_deg[0] < -90.0 || self.elevation_deg[1] > 90.0 {
            return Err(Error::Config("elevation must lie in [-90, 90] degrees".into()));
        }
        Ok(())
    }

    /// Rotation for the given angles (degrees) and object center `t`.
    pub fn rotation_for(&self, elevation: f64, azimuth: f64, inplane: f64, t: &Vector3<f64>) -> Matrix3<f64> {
        let (e, a, g) = (elevation.to_radians(), azimuth.to_radians(), inplane.to_radians());
        // Camera axes expressed in the object frame when the object sits on the optical axis.
        let forward = Vector3::new(e.cos() * a.sin(), e.sin(), e.cos() * a.cos());
        let right = Vector3::new(a.cos(), 0.0, -a.sin());
        let down = forward.cross(&right);
        let x = right * g.cos() + down * g.sin();
        let y = -right * g.sin() + down * g.cos();
        let m = Matrix3::from_columns(&[x, y, forward]);
        match self.kind {
            PriorKind::Plane => m,
            PriorKind::Sphere => {
                let align = Rotation3::rotation_between(&t.normalize(), &Vector3::z())
                    .unwrap_or_else(|| Rotation3::from_axis_angle(&Unit::new_normalize(Vector3::x()), std::f64::consts::PI));
                m * align.into_inner()
            }
        }
    }

    /// Elevation, azimuth and in-plane angles in degrees.
    pub fn sample_angles(&self, rng: &mut impl Rng) -> (f64, f64, f64) {
        let e = draw(rng, self.elevation_deg);
        let a = draw(rng, self.azimuth_deg);
        let g = draw(rng, self.inplane_deg);
        (e, a, g)
    }

    /// Draws a pose whose unit bounding sphere projects fully inside the frame.
    pub fn sample(&self, camera: &Camera, rng: &mut impl Rng) -> Result<PoseSample> {
        self.validate()?;
        let (e, a, g) = self.sample_angles(rng);
        for _ in 0..MAX_REJECTIONS {
            let t = Vector3::new(draw(rng, self.lateral), draw(rng, self.lateral), draw(rng, self.distance));
            let pose = PoseSample { rotation: self.rotation_for(e, a, g, &t), translation: t };
            if crop_window(&pose, camera)?.inside(camera) {
                return Ok(pose);
            }
        }
        Err(Error::Config(format!(
            "pose prior never keeps the unit sphere inside the {}x{} frame",
            camera.width, camera.height
        )))
    }
}

/// Samples one pose; see [`PosePrior::sample`].
pub fn sample_pose(prior: &PosePrior, camera: &Camera, rng: &mut impl Rng) -> Result<PoseSample> {
    prior.sample(camera, rng)
}
