//! SDF volume rendering of one posed instance inside its crop window.

pub mod camera;
pub mod neus;
pub mod pose;
pub mod sampling;

use objint_autodiff::{Tape, Tensor, Var};
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use camera::{crop_window, Camera, CropWindow};
pub use neus::{logistic_cdf, logistic_density, neus_weights, neus_weights_tape};
pub use pose::{sample_pose, PosePrior, PoseSample, PriorKind};
pub use sampling::{importance_resample, merge_depths, ray_sphere, stratified};

use crate::error::{Error, Result};
use crate::fields::{points_tensor, LatentCode, DEGENERATE_GRADIENT};
use crate::model::{BindMode, BoundModel, RenderModel};
use crate::raster::Raster;
use crate::shading::{shade, LightConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RenderConfig {
    pub coarse_samples: usize,
    pub importance_samples: usize,
    /// Radius of the sphere around the object center that bounds every ray interval.
    pub bounding_radius: f64,
    /// Rays per tape when evaluating the fields.
    pub chunk_rays: usize,
}

impl Default for RenderConfig {
    fn default() -> Self {
        Self { coarse_samples: 16, importance_samples: 4, bounding_radius: 1.5, chunk_rays: 128 }
    }
}

impl RenderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.coarse_samples < 2 || self.chunk_rays == 0 || !(self.bounding_radius > 0.0) {
            return Err(Error::Config(format!("invalid render settings {self:?}")));
        }
        Ok(())
    }

    pub fn samples_per_ray(&self) -> usize {
        self.coarse_samples + self.importance_samples
    }
}

/// One ray in the object frame, tagged with the output pixel it feeds.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Ray {
    pub pixel: usize,
    pub origin: [f64; 3],
    pub dir: [f64; 3],
    pub near: f64,
    pub far: f64,
}

impl Ray {
    pub fn at(&self, t: f64) -> [f64; 3] {
        std::array::from_fn(|i| self.origin[i] + t * self.dir[i])
    }
}

/// The square region of the full frame that a crop covers: `[x0, x0+side) x [y0, y0+side)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Viewport {
    pub x0: f64,
    pub y0: f64,
    pub side: f64,
    pub res: usize,
}

impl Viewport {
    /// The square around the projected unit sphere of `pose`.
    pub fn for_pose(pose: &PoseSample, camera: &Camera, res: usize) -> Result<Self> {
        let (x0, y0, side) = crop_window(pose, camera)?.square();
        Ok(Self { x0, y0, side, res })
    }

    /// Continuous full-frame coordinates of the center of output pixel `(row, col)`.
    pub fn pixel_center(&self, row: usize, col: usize) -> (f64, f64) {
        let step = self.side / self.res as f64;
        (self.x0 + (col as f64 + 0.5) * step, self.y0 + (row as f64 + 0.5) * step)
    }
}

/// Rays of every output pixel that intersect the bounding sphere.
pub fn build_rays(pose: &PoseSample, camera: &Camera, view: &Viewport, radius: f64) -> Vec<Ray> {
    let origin = pose.to_object([0.0; 3]);
    let mut rays = Vec::new();
    for row in 0..view.res {
        for col in 0..view.res {
            let (u, v) = view.pixel_center(row, col);
            let dir = pose.direction_to_object(camera.direction(u, v));
            if let Some((near, far)) = ray_sphere(origin, dir, radius) {
                rays.push(Ray { pixel: row * view.res + col, origin, dir, near, far });
            }
        }
    }
    rays
}

/// Everything needed to re-render a crop deterministically: its rays and the
/// sorted sample depths per ray.
#[derive(Clone, Debug, PartialEq)]
pub struct RenderPlan {
    pub pose: PoseSample,
    pub view: Viewport,
    pub rays: Vec<Ray>,
    pub samples_per_ray: usize,
    /// `rays.len() * samples_per_ray` depths, ray-major.
    pub depths: Vec<f64>,
}

impl RenderPlan {
    /// The scene light expressed in this instance's object frame.
    pub fn object_light(&self, light: &LightConfig) -> Result<LightConfig> {
        LightConfig::new(self.pose.direction_to_object(light.direction()))
    }

    pub fn num_points(&self) -> usize {
        self.depths.len()
    }

    pub fn points(&self) -> Vec<[f64; 3]> {
        let n = self.samples_per_ray;
        self.rays
            .iter()
            .enumerate()
            .flat_map(|(k, r)| self.depths[k * n..(k + 1) * n].iter().map(move |t| r.at(*t)))
            .collect()
    }
}

/// Premultiplied per-pixel outputs of one crop.
#[derive(Clone, Debug, PartialEq)]
pub struct RenderedCrop {
    pub rgb: Raster,
    pub mask: Raster,
    /// Expected ray distance to the surface (0 where nothing was hit).
    pub depth: Raster,
    /// Weight-composited albedo (premultiplied by the mask).
    pub albedo: Raster,
    /// Weight-composited unit normals in the object frame (premultiplied).
    pub normal: Raster,
}

struct ChunkVars {
    rgb: Var,
    mask: Var,
    depth: Var,
    albedo: Var,
    normal: Var,
    /// `Σ (‖∇f‖ - 1)²` over this chunk's samples.
    eikonal_sum: Var,
}

fn rows_tensor(rows: impl Iterator<Item = [f64; 3]>, n: usize) -> Tensor {
    let data: Vec<f64> = rows.flatten().collect();
    Tensor::new(vec![n, 3], data).expect("[n,3]")
}

/// `Σ_samples w ⊙ values` for `values` shaped `[R*N, C]` and `w` shaped `[R*N, 1]`.
fn composite(tape: &mut Tape, values: Var, w: Var, rays: usize, n: usize) -> Result<Var> {
    let c = tape.shape(values)[1];
    let wv = tape.mul(values, w)?;
    let wv = tape.reshape(wv, &[rays, n, c])?;
    let s = tape.sum_axis(wv, 1)?;
    Ok(tape.reshape(s, &[rays, c])?)
}

fn render_chunk(
    tape: &mut Tape,
    bound: &BoundModel,
    rays: &[Ray],
    depths: &[f64],
    n: usize,
    light: &LightConfig,
) -> Result<ChunkVars> {
    let r = rays.len();
    let pts: Vec<[f64; 3]> = rays
        .iter()
        .enumerate()
        .flat_map(|(k, ray)| depths[k * n..(k + 1) * n].iter().map(move |t| ray.at(*t)))
        .collect();
    let points = tape.constant(points_tensor(&pts));
    let (f, g) = bound.sdf.sdf_and_grad(tape, points)?;

    let gnorm = tape.norm_last(g)?;
    let dev = tape.add_scalar(gnorm, -1.0)?;
    let dev = tape.square(dev)?;
    let eikonal_sum = tape.sum(dev)?;

    let view_dirs = rows_tensor(rays.iter().flat_map(|ray| std::iter::repeat_n(ray.dir.map(|v| -v), n)), r * n);
    let degenerate = tape.value(gnorm).map(|v| if v > DEGENERATE_GRADIENT { 0.0 } else { 1.0 });
    let keep = degenerate.map(|d| 1.0 - d);
    let safe = tape.max_const(gnorm, DEGENERATE_GRADIENT)?;
    let unit = tape.div(g, safe)?;
    let unit = tape.mul_const(unit, keep)?;
    let fallback = Tensor::from_fn(vec![r * n, 3], |i| view_dirs.data()[i] * degenerate.data()[i / 3]);
    let fallback = tape.constant(fallback);
    let normals = tape.add(unit, fallback)?;
    let view = tape.constant(view_dirs);

    let albedo = bound.albedo.albedo(tape, points)?;
    let radiance = shade(tape, albedo, normals, view, light, bound.phong)?;

    let f_rays = tape.reshape(f, &[r, n])?;
    let w = neus_weights_tape(tape, f_rays, bound.scale)?;
    let mask = tape.sum_axis(w, 1)?;
    let t = tape.constant(Tensor::new(vec![r, n], depths.to_vec())?);
    let wt = tape.mul(w, t)?;
    let wt = tape.sum_axis(wt, 1)?;
    let safe_mask = tape.max_const(mask, 1e-8)?;
    let depth = tape.div(wt, safe_mask)?;
    let w_col = tape.reshape(w, &[r * n, 1])?;
    let rgb = composite(tape, radiance, w_col, r, n)?;
    let albedo = composite(tape, albedo, w_col, r, n)?;
    let normal = composite(tape, normals, w_col, r, n)?;
    Ok(ChunkVars { rgb, mask, depth, albedo, normal, eikonal_sum })
}

/// Signed distances at the given depths, evaluated chunk-wise without gradients.
fn sdf_at_depths<M: RenderModel>(
    model: &M,
    z: &LatentCode,
    rays: &[Ray],
    depths: &[f64],
    n: usize,
    chunk: usize,
) -> Result<Vec<f64>> {
    let parts: Vec<Result<Vec<f64>>> = rays
        .par_chunks(chunk)
        .zip(depths.par_chunks(chunk * n))
        .map(|(rs, ds)| {
            let mut tape = Tape::new();
            let bound = model.bind(&mut tape, z, BindMode::FROZEN)?;
            let pts: Vec<[f64; 3]> = rs
                .iter()
                .enumerate()
                .flat_map(|(k, ray)| ds[k * n..(k + 1) * n].iter().map(move |t| ray.at(*t)))
                .collect();
            let p = tape.constant(points_tensor(&pts));
            let f = bound.sdf.sdf(&mut tape, p)?;
            Ok(tape.value(f).data().to_vec())
        })
        .collect();
    let mut out = Vec::with_capacity(depths.len());
    for p in parts {
        out.extend(p?);
    }
    Ok(out)
}

/// Coarse stratified samples, then importance samples drawn from their NeuS weights.
///
/// With `rng` the coarse depths and the refinement quantiles are jittered.
pub fn plan_samples<M: RenderModel, R: Rng + ?Sized>(
    model: &M,
    z: &LatentCode,
    pose: &PoseSample,
    view: Viewport,
    rays: Vec<Ray>,
    cfg: &RenderConfig,
    mut rng: Option<&mut R>,
) -> Result<RenderPlan> {
    cfg.validate()?;
    let nc = cfg.coarse_samples;
    let mut coarse = Vec::with_capacity(rays.len() * nc);
    for ray in &rays {
        coarse.extend(stratified(ray.near, ray.far, nc, rng.as_deref_mut()));
    }
    let n = cfg.samples_per_ray();
    if cfg.importance_samples == 0 {
        return Ok(RenderPlan { pose: *pose, view, rays, samples_per_ray: nc, depths: coarse });
    }
    let sdf = sdf_at_depths(model, z, &rays, &coarse, nc, cfg.chunk_rays)?;
    let s = model.scale();
    let mut depths = Vec::with_capacity(rays.len() * n);
    for k in 0..rays.len() {
        let c = &coarse[k * nc..(k + 1) * nc];
        let w = neus_weights(&sdf[k * nc..(k + 1) * nc], c, s)?;
        let refined = importance_resample(&w, c, cfg.importance_samples, rng.as_deref_mut())?;
        depths.extend(merge_depths(c, &refined));
    }
    Ok(RenderPlan { pose: *pose, view, rays, samples_per_ray: n, depths })
}

fn chunk_bounds(plan: &RenderPlan, chunk: usize) -> Vec<(usize, usize)> {
    (0..plan.rays.len()).step_by(chunk).map(|s| (s, (s + chunk).min(plan.rays.len()))).collect()
}

/// Evaluates a plan without recording gradients.
pub fn execute_plan<M: RenderModel>(
    model: &M,
    z: &LatentCode,
    plan: &RenderPlan,
    light: &LightConfig,
    cfg: &RenderConfig,
) -> Result<RenderedCrop> {
    let res = plan.view.res;
    let n = plan.samples_per_ray;
    let light = &plan.object_light(light)?;
    let chunks = chunk_bounds(plan, cfg.chunk_rays);
    let outs: Vec<Result<[Vec<f64>; 5]>> = chunks
        .par_iter()
        .map(|&(a, b)| {
            let mut tape = Tape::new();
            let bound = model.bind(&mut tape, z, BindMode::FROZEN)?;
            let v = render_chunk(&mut tape, &bound, &plan.rays[a..b], &plan.depths[a * n..b * n], n, light)?;
            Ok([v.rgb, v.mask, v.depth, v.albedo, v.normal].map(|x| tape.value(x).data().to_vec()))
        })
        .collect();
    let mut crop = RenderedCrop {
        rgb: Raster::zeros(3, res, res),
        mask: Raster::zeros(1, res, res),
        depth: Raster::zeros(1, res, res),
        albedo: Raster::zeros(3, res, res),
        normal: Raster::zeros(3, res, res),
    };
    for (&(a, b), out) in chunks.iter().zip(outs) {
        let [rgb, mask, depth, albedo, normal] = out?;
        for (k, ray) in plan.rays[a..b].iter().enumerate() {
            let (y, x) = (ray.pixel / res, ray.pixel % res);
            crop.mask.set(0, y, x, mask[k]);
            crop.depth.set(0, y, x, depth[k]);
            for c in 0..3 {
                crop.rgb.set(c, y, x, rgb[3 * k + c]);
                crop.albedo.set(c, y, x, albedo[3 * k + c]);
                crop.normal.set(c, y, x, normal[3 * k + c]);
            }
        }
    }
    Ok(crop)
}

/// Renders the crop around `pose` at `res x res`; returns the crop and its plan.
///
/// `light` is given in the camera frame, so instances in different poses are lit
/// from different object-frame directions.
#[allow(clippy::too_many_arguments)]
pub fn render_crop<M: RenderModel, R: Rng + ?Sized>(
    model: &M,
    z: &LatentCode,
    pose: &PoseSample,
    light: &LightConfig,
    camera: &Camera,
    res: usize,
    cfg: &RenderConfig,
    rng: Option<&mut R>,
) -> Result<(RenderedCrop, RenderPlan)> {
    let view = Viewport::for_pose(pose, camera, res)?;
    render_view(model, z, pose, light, camera, view, cfg, rng)
}

/// Renders an explicit viewport of the full frame.
#[allow(clippy::too_many_arguments)]
pub fn render_view<M: RenderModel, R: Rng + ?Sized>(
    model: &M,
    z: &LatentCode,
    pose: &PoseSample,
    light: &LightConfig,
    camera: &Camera,
    view: Viewport,
    cfg: &RenderConfig,
    rng: Option<&mut R>,
) -> Result<(RenderedCrop, RenderPlan)> {
    let rays = build_rays(pose, camera, &view, cfg.bounding_radius);
    let plan = plan_samples(model, z, pose, view, rays, cfg, rng)?;
    let crop = execute_plan(model, z, &plan, light, cfg)?;
    Ok((crop, plan))
}

/// Per-pixel intrinsics read off a rendered crop.
#[derive(Clone, Debug, PartialEq)]
pub struct SurfaceMaps {
    /// 1 where the rendered mask exceeds the threshold, else 0.
    pub mask: Raster,
    /// Expected ray distance.
    pub depth: Raster,
    /// Unit normals in the camera frame at the expected-depth surface point.
    pub normal: Raster,
    /// Composited albedo divided by the mask.
    pub albedo: Raster,
}

/// Intrinsic maps of `crop` (rendered from `plan`), zero outside `mask > threshold`.
///
/// Normals are `∇f/‖∇f‖` evaluated at `origin + depth · dir`, falling back to the
/// view direction where the gradient is degenerate.
pub fn surface_maps<M: RenderModel>(
    model: &M,
    z: &LatentCode,
    plan: &RenderPlan,
    crop: &RenderedCrop,
    threshold: f64,
) -> Result<SurfaceMaps> {
    let res = plan.view.res;
    let mut maps = SurfaceMaps {
        mask: Raster::zeros(1, res, res),
        depth: Raster::zeros(1, res, res),
        normal: Raster::zeros(3, res, res),
        albedo: Raster::zeros(3, res, res),
    };
    let hits: Vec<&Ray> = plan
        .rays
        .iter()
        .filter(|r| crop.mask.get(0, r.pixel / res, r.pixel % res) > threshold)
        .collect();
    if hits.is_empty() {
        return Ok(maps);
    }
    let points: Vec<[f64; 3]> = hits.iter().map(|r| r.at(crop.depth.get(0, r.pixel / res, r.pixel % res))).collect();
    let mut tape = Tape::new();
    let bound = model.bind(&mut tape, z, BindMode::FROZEN)?;
    let p = tape.constant(points_tensor(&points));
    let (_, g) = bound.sdf.sdf_and_grad(&mut tape, p)?;
    let grads = tape.value(g).data();
    let rt = plan.pose.rotation.transpose();
    for (k, ray) in hits.iter().enumerate() {
        let (y, x) = (ray.pixel / res, ray.pixel % res);
        let m = crop.mask.get(0, y, x);
        let g = &grads[3 * k..3 * k + 3];
        let n_obj = crate::fields::normalize_gradient([g[0], g[1], g[2]]).unwrap_or(ray.dir.map(|v| -v));
        let n = rt * nalgebra::Vector3::from(n_obj);
        maps.mask.set(0, y, x, 1.0);
        maps.depth.set(0, y, x, crop.depth.get(0, y, x));
        for c in 0..3 {
            maps.normal.set(c, y, x, n[c]);
            maps.albedo.set(c, y, x, (crop.albedo.get(c, y, x) / m.max(1e-12)).clamp(0.0, 1.0));
        }
    }
    Ok(maps)
}

/// Upstream gradients of a scalar objective with respect to a rendered crop.
#[derive(Clone, Debug, Default)]
pub struct CropSeeds {
    pub rgb: Option<Raster>,
    pub mask: Option<Raster>,
    /// Multiplies `Σ (‖∇f‖ - 1)²` over the plan's sample points.
    pub eikonal: f64,
}

/// Gradients of `⟨seeds, render⟩` for the leaves selected by `mode`.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelGrads {
    /// In [`crate::model::Generator::params`] order; empty unless parameters were bound.
    pub params: Vec<Tensor>,
    pub latent: Option<Tensor>,
    /// Unweighted `Σ (‖∇f‖ - 1)²` over the plan's sample points.
    pub eikonal_sum: f64,
}

/// Vector-Jacobian product through a rendered crop, computed chunk by chunk on
/// fresh tapes and summed in a fixed order.
pub fn backprop_plan<M: RenderModel>(
    model: &M,
    z: &LatentCode,
    plan: &RenderPlan,
    light: &LightConfig,
    cfg: &RenderConfig,
    seeds: &CropSeeds,
    mode: BindMode,
) -> Result<ModelGrads> {
    let res = plan.view.res;
    let n = plan.samples_per_ray;
    for s in [&seeds.rgb, &seeds.mask].into_iter().flatten() {
        if s.height() != res || s.width() != res {
            return Err(Error::invalid("render seed resolution does not match the plan"));
        }
    }
    let light = &plan.object_light(light)?;
    let chunks = chunk_bounds(plan, cfg.chunk_rays);
    let parts: Vec<Result<(Vec<Tensor>, Option<Tensor>, f64)>> = chunks
        .par_iter()
        .map(|&(a, b)| {
            let rays = &plan.rays[a..b];
            let mut tape = Tape::new();
            let bound = model.bind(&mut tape, z, mode)?;
            let v = render_chunk(&mut tape, &bound, rays, &plan.depths[a * n..b * n], n, light)?;
            let eikonal_sum = tape.value(v.eikonal_sum).data()[0];
            let mut terms = Vec::new();
            if let Some(seed) = &seeds.rgb {
                let t = Tensor::from_fn(vec![rays.len(), 3], |i| {
                    let p = rays[i / 3].pixel;
                    seed.get(i % 3, p / res, p % res)
                });
                let t = tape.constant(t);
                let prod = tape.mul(v.rgb, t)?;
                terms.push(tape.sum(prod)?);
            }
            if let Some(seed) = &seeds.mask {
                let t = Tensor::from_fn(vec![rays.len(), 1], |i| {
                    let p = rays[i].pixel;
                    seed.get(0, p / res, p % res)
                });
                let t = tape.constant(t);
                let prod = tape.mul(v.mask, t)?;
                terms.push(tape.sum(prod)?);
            }
            if seeds.eikonal != 0.0 {
                terms.push(tape.scale(v.eikonal_sum, seeds.eikonal)?);
            }
            let Some((&first, rest)) = terms.split_first() else {
                return Ok((Vec::new(), None, eikonal_sum));
            };
            let mut total = first;
            for &t in rest {
                total = tape.add(total, t)?;
            }
            let grads = tape.backward(total)?;
            let params = bound.params.iter().map(|v| grads.wrt(*v)).collect();
            let latent = mode.latent.then(|| grads.wrt(bound.latent));
            Ok((params, latent, eikonal_sum))
        })
        .collect();
    let mut out = ModelGrads { params: Vec::new(), latent: None, eikonal_sum: 0.0 };
    for part in parts {
        let (params, latent, eikonal_sum) = part?;
        out.eikonal_sum += eikonal_sum;
        accumulate(&mut out.params, params);
        if let Some(l) = latent {
            match &mut out.latent {
                None => out.latent = Some(l),
                Some(acc) => add_into(acc, &l),
            }
        }
    }
    Ok(out)
}

pub(crate) fn add_into(acc: &mut Tensor, t: &Tensor) {
    acc.data_mut().iter_mut().zip(t.data()).for_each(|(a, b)| *a += b);
}

pub(crate) fn accumulate(acc: &mut Vec<Tensor>, part: Vec<Tensor>) {
    if acc.is_empty() {
        *acc = part;
    } else {
        acc.iter_mut().zip(&part).for_each(|(a, p)| add_into(a, p));
    }
}

/// Eikonal residual sum and gradient over arbitrary object-frame points.
pub fn eikonal_backprop<M: RenderModel>(
    model: &M,
    z: &LatentCode,
    points: &[[f64; 3]],
    weight: f64,
    chunk: usize,
) -> Result<(f64, Vec<Tensor>)> {
    let parts: Vec<Result<(f64, Vec<Tensor>)>> = points
        .par_chunks(chunk.max(1))
        .map(|pts| {
            let mut tape = Tape::new();
            let bound = model.bind(&mut tape, z, BindMode::PARAMS)?;
            let p = tape.constant(points_tensor(pts));
            let (_, g) = bound.sdf.sdf_and_grad(&mut tape, p)?;
            let n = tape.norm_last(g)?;
            let d = tape.add_scalar(n, -1.0)?;
            let d = tape.square(d)?;
            let s = tape.sum(d)?;
            let value = tape.value(s).data()[0];
            let scaled = tape.scale(s, weight)?;
            let grads = tape.backward(scaled)?;
            Ok((value, bound.params.iter().map(|v| grads.wrt(*v)).collect()))
        })
        .collect();
    let mut total = 0.0;
    let mut grads = Vec::new();
    for part in parts {
        let (v, g) = part?;
        total += v;
        accumulate(&mut grads, g);
    }
    Ok((total, grads))
}

/// Sum of `(‖∇f‖ - 1)²` over the sample points of a plan, without gradients.
pub fn eikonal_sum_plan<M: RenderModel>(model: &M, z: &LatentCode, plan: &RenderPlan, chunk: usize) -> Result<f64> {
    let pts = plan.points();
    let parts: Vec<Result<f64>> = pts
        .par_chunks(chunk.max(1))
        .map(|p| {
            let mut tape = Tape::new();
            let bound = model.bind(&mut tape, z, BindMode::FROZEN)?;
            let pv = tape.constant(points_tensor(p));
            let (_, g) = bound.sdf.sdf_and_grad(&mut tape, pv)?;
            let n = tape.value(g).data().chunks_exact(3).map(|c| {
                let norm = (c[0] * c[0] + c[1] * c[1] + c[2] * c[2]).sqrt();
                (norm - 1.0) * (norm - 1.0)
            });
            Ok(n.sum())
        })
        .collect();
    parts.into_iter().sum()
}
