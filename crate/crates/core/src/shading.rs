//! Phong illumination with global material scalars and one directional light.

use objint_autodiff::{Tape, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Clamp applied to `r·v` before raising it to the shininess power.
const SPECULAR_FLOOR: f64 = 1e-12;

/// Material scalars, stored as their effective values.
///
/// Non-negativity is enforced by [`PhongParams::project`] after every update.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PhongParams {
    pub k_d: f64,
    pub k_a: f64,
    pub k_s: f64,
    pub alpha: f64,
}

impl Default for PhongParams {
    fn default() -> Self {
        Self { k_d: 1.0, k_a: 0.5, k_s: 0.0, alpha: 0.0 }
    }
}

impl PhongParams {
    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(vec![1, 4], vec![self.k_d, self.k_a, self.k_s, self.alpha]).expect("[1,4]")
    }

    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        match t.data() {
            [k_d, k_a, k_s, alpha] => Ok(Self { k_d: *k_d, k_a: *k_a, k_s: *k_s, alpha: *alpha }),
            _ => Err(Error::invalid(format!("phong tensor needs 4 values, got shape {:?}", t.shape()))),
        }
    }

    /// Clamps every scalar onto `[0, ∞)`.
    pub fn project(t: &mut Tensor) {
        t.data_mut().iter_mut().for_each(|v| *v = v.max(0.0));
    }

    pub fn is_valid(&self) -> bool {
        [self.k_d, self.k_a, self.k_s, self.alpha].iter().all(|v| v.is_finite() && *v >= 0.0)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "[f64; 3]", into = "[f64; 3]")]
pub struct LightConfig {
    direction: [f64; 3],
}

impl LightConfig {
    /// Normalizes `direction`; a zero or non-finite vector is rejected.
    pub fn new(direction: [f64; 3]) -> Result<Self> {
        let n = dot(direction, direction).sqrt();
        if !(n.is_finite() && n > 0.0) {
            return Err(Error::Config(format!("light direction {direction:?} cannot be normalized")));
        }
        // Already-unit input is kept as is so serialization roundtrips exactly.
        if (n - 1.0).abs() <= 4.0 * f64::EPSILON {
            return Ok(Self { direction });
        }
        Ok(Self { direction: direction.map(|v| v / n) })
    }

    pub fn direction(&self) -> [f64; 3] {
        self.direction
    }

    /// Mirror image across the y-z plane (left to right in the camera frame).
    pub fn mirrored_x(&self) -> Self {
        let [x, y, z] = self.direction;
        Self { direction: [-x, y, z] }
    }
}

impl Default for LightConfig {
    fn default() -> Self {
        Self::new([0.0, -1.0, -1.0]).expect("nonzero")
    }
}

impl TryFrom<[f64; 3]> for LightConfig {
    type Error = Error;

    fn try_from(v: [f64; 3]) -> Result<Self> {
        Self::new(v)
    }
}

impl From<LightConfig> for [f64; 3] {
    fn from(l: LightConfig) -> Self {
        l.direction
    }
}

pub fn dot(a: [f64; 3], b: [f64; 3]) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

/// `k_d max(n·l, 0) + k_a`.
pub fn diffuse_shade(n: [f64; 3], l: [f64; 3], p: &PhongParams) -> f64 {
    p.k_d * dot(n, l).max(0.0) + p.k_a
}

/// Mirror direction `2(n·l)n - l`.
pub fn reflect(n: [f64; 3], l: [f64; 3]) -> [f64; 3] {
    let d = 2.0 * dot(n, l);
    std::array::from_fn(|i| d * n[i] - l[i])
}

/// `s·albedo + k_s max(r·v, 0)^α`, with the specular term zero where `r·v ≤ 0`.
pub fn phong_radiance(albedo: [f64; 3], n: [f64; 3], l: [f64; 3], v: [f64; 3], p: &PhongParams) -> [f64; 3] {
    let s = diffuse_shade(n, l, p);
    let rv = dot(reflect(n, l), v);
    let spec = if rv > 0.0 { p.k_s * rv.max(SPECULAR_FLOOR).powf(p.alpha) } else { 0.0 };
    albedo.map(|a| s * a + spec)
}

/// Batched [`phong_radiance`] on a tape.
///
/// `albedo`, `normals` and `view` are `[P, 3]`, `phong` is `[1, 4]`; returns `[P, 3]`.
pub fn shade(
    tape: &mut Tape,
    albedo: Var,
    normals: Var,
    view: Var,
    light: &LightConfig,
    phong: Var,
) -> Result<Var> {
    let l = light.direction();
    let l_col = tape.constant(Tensor::new(vec![3, 1], l.to_vec())?);
    let l_row = tape.constant(Tensor::new(vec![1, 3], l.to_vec())?);
    let k_d = tape.slice(phong, 1, 0, 1)?;
    let k_a = tape.slice(phong, 1, 1, 2)?;
    let k_s = tape.slice(phong, 1, 2, 3)?;
    let alpha = tape.slice(phong, 1, 3, 4)?;

    let ndotl = tape.matmul(normals, l_col)?;
    let lit = tape.max_const(ndotl, 0.0)?;
    let s = tape.mul(lit, k_d)?;
    let s = tape.add(s, k_a)?;
    let diffuse = tape.mul(albedo, s)?;

    let nl_n = tape.mul(normals, ndotl)?;
    let nl_n = tape.scale(nl_n, 2.0)?;
    let r = tape.sub(nl_n, l_row)?;
    let rv = tape.mul(r, view)?;
    let rv = tape.sum_axis(rv, 1)?;
    let front = tape.value(rv).map(|x| if x > 0.0 { 1.0 } else { 0.0 });
    let base = tape.max_const(rv, SPECULAR_FLOOR)?;
    let spec = tape.pow(base, alpha)?;
    let spec = tape.mul(spec, k_s)?;
    let spec = tape.mul_const(spec, front)?;
    Ok(tape.add(diffuse, spec)?)
}
