//! Closed-form textured shapes used as ground-truth assets and test oracles.

use objint_autodiff::{Tape, Tensor, Var};
use serde::{Deserialize, Serialize};

use super::{AlbedoQuery, SdfQuery};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Shape {
    Sphere { radius: f64 },
    /// Bound-preserving ellipsoid approximation `k0 (k0 - 1) / k1`.
    Ellipsoid { radii: [f64; 3] },
    /// Hard union of spheres `(center, radius)`.
    SphereUnion { spheres: Vec<([f64; 3], f64)> },
}

impl Shape {
    pub fn validate(&self) -> Result<()> {
        let ok = match self {
            Shape::Sphere { radius } => *radius > 0.0,
            Shape::Ellipsoid { radii } => radii.iter().all(|r| *r > 0.0),
            Shape::SphereUnion { spheres } => !spheres.is_empty() && spheres.iter().all(|s| s.1 > 0.0),
        };
        if ok {
            Ok(())
        } else {
            Err(Error::invalid(format!("degenerate analytic shape {self:?}")))
        }
    }

    fn record(&self, tape: &mut Tape, p: Var) -> Result<Var> {
        Ok(match self {
            Shape::Sphere { radius } => {
                let n = tape.norm_last(p)?;
                tape.add_scalar(n, -radius)?
            }
            Shape::Ellipsoid { radii } => {
                let inv = tape.constant(Tensor::new(vec![1, 3], radii.iter().map(|r| 1.0 / r).collect())?);
                let inv2 = tape.constant(Tensor::new(vec![1, 3], radii.iter().map(|r| 1.0 / (r * r)).collect())?);
                let q0 = tape.mul(p, inv)?;
                let k0 = tape.norm_last(q0)?;
                let q1 = tape.mul(p, inv2)?;
                let k1 = tape.norm_last(q1)?;
                let k1 = tape.max_const(k1, 1e-12)?;
                let km = tape.add_scalar(k0, -1.0)?;
                let num = tape.mul(k0, km)?;
                tape.div(num, k1)?
            }
            Shape::SphereUnion { spheres } => {
                let mut best: Option<Var> = None;
                for (c, r) in spheres {
                    let cv = tape.constant(Tensor::new(vec![1, 3], c.to_vec())?);
                    let d = tape.sub(p, cv)?;
                    let n = tape.norm_last(d)?;
                    let f = tape.add_scalar(n, -r)?;
                    let neg = tape.neg(f)?;
                    best = Some(match best {
                        None => neg,
                        Some(b) => tape.maximum(b, neg)?,
                    });
                }
                let b = best.expect("validated nonempty");
                tape.neg(b)?
            }
        })
    }
}

/// Procedural albedo: smooth bands along the object's y axis blending two colors.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BandAlbedo {
    pub base: [f64; 3],
    pub accent: [f64; 3],
    pub frequency: f64,
}

impl Default for BandAlbedo {
    fn default() -> Self {
        Self { base: [0.85, 0.35, 0.2], accent: [0.2, 0.55, 0.85], frequency: 3.0 }
    }
}

impl BandAlbedo {
    pub fn validate(&self) -> Result<()> {
        let inside = |c: &[f64; 3]| c.iter().all(|v| *v > 0.0 && *v < 1.0);
        if inside(&self.base) && inside(&self.accent) && self.frequency.is_finite() {
            Ok(())
        } else {
            Err(Error::invalid("band albedo colors must lie in (0, 1)"))
        }
    }

    /// Albedo at an object-frame point.
    pub fn at(&self, p: [f64; 3]) -> [f64; 3] {
        let t = 0.5 + 0.5 * (self.frequency * p[1]).sin();
        std::array::from_fn(|c| self.base[c] + t * (self.accent[c] - self.base[c]))
    }
}

/// A textured analytic object, uniformly scaled by `scale`.
#[derive(Clone, Debug, PartialEq)]
pub struct AnalyticObject {
    pub shape: Shape,
    pub albedo: BandAlbedo,
    pub scale: f64,
}

impl AnalyticObject {
    pub fn new(shape: Shape, albedo: BandAlbedo, scale: f64) -> Result<Self> {
        shape.validate()?;
        albedo.validate()?;
        if !(scale > 0.0) {
            return Err(Error::invalid(format!("object scale must be positive, got {scale}")));
        }
        Ok(Self { shape, albedo, scale })
    }

    pub fn unit_sphere() -> Self {
        Self { shape: Shape::Sphere { radius: 1.0 }, albedo: BandAlbedo::default(), scale: 1.0 }
    }

    /// Scalar evaluation outside any tape.
    pub fn sdf_at(&self, p: [f64; 3]) -> f64 {
        let mut tape = Tape::new();
        let v = tape.constant(Tensor::new(vec![1, 3], p.to_vec()).expect("[1,3]"));
        let f = self.sdf(&mut tape, v).expect("analytic sdf on a [1,3] point");
        tape.value(f).data()[0]
    }
}

impl SdfQuery for AnalyticObject {
    fn sdf(&self, tape: &mut Tape, points: Var) -> Result<Var> {
        let q = tape.scale(points, 1.0 / self.scale)?;
        let f = self.shape.record(tape, q)?;
        Ok(tape.scale(f, self.scale)?)
    }

    /// The gradient is recovered on a private tape and enters as a constant.
    fn sdf_and_grad(&self, tape: &mut Tape, points: Var) -> Result<(Var, Var)> {
        let f = self.sdf(tape, points)?;
        let mut sub = Tape::new();
        let p = sub.leaf(tape.value(points).clone());
        let fs = self.sdf(&mut sub, p)?;
        let total = sub.sum(fs)?;
        let g = sub.backward(total)?.wrt(p);
        Ok((f, tape.constant(g)))
    }
}

impl AlbedoQuery for AnalyticObject {
    fn albedo(&self, tape: &mut Tape, points: Var) -> Result<Var> {
        let n = tape.shape(points)[0];
        let y = tape.slice(points, 1, 1, 2)?;
        let y = tape.scale(y, self.albedo.frequency / self.scale)?;
        let s = tape.sin(y)?;
        let s = tape.scale(s, 0.5)?;
        let t = tape.add_scalar(s, 0.5)?;
        let base = tape.constant(Tensor::new(vec![1, 3], self.albedo.base.to_vec())?);
        let delta = tape.constant(Tensor::new(
            vec![1, 3],
            (0..3).map(|c| self.albedo.accent[c] - self.albedo.base[c]).collect(),
        )?);
        let tb = tape.broadcast_to(t, &[n, 3])?;
        let d = tape.mul(tb, delta)?;
        Ok(tape.add(d, base)?)
    }
}
