//! Inverting a trained generator on observed crops, and re-rendering the result.

pub mod eval;
pub mod metrics;

use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fields::{average_latent, LatentCode};
use crate::model::{BindMode, Generator, RenderModel};
use crate::raster::Raster;
use crate::render::{
    backprop_plan, build_rays, execute_plan, plan_samples, Camera, CropSeeds, PosePrior, PoseSample, RenderConfig,
    RenderPlan, RenderedCrop, Viewport,
};
use crate::scene::SceneConfig;
use crate::shading::LightConfig;
use crate::training::adam::{AdamConfig, AdamState};

pub use metrics::{
    normal_angle_error, psnr, recon_proxy_error, recon_proxy_grad, si_albedo_metrics, si_depth_mse, ssim,
    AlbedoMetrics,
};

type NoRng = ChaCha8Rng;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct InversionConfig {
    /// Latent samples averaged into the starting code.
    pub latent_samples: usize,
    /// Prior poses rendered and ranked at the mean code.
    pub pose_candidates: usize,
    /// Best-ranked poses that get latent refinement.
    pub top_k: usize,
    /// Adam steps on the latent per candidate.
    pub steps: usize,
    pub lr: f64,
    pub adam: AdamConfig,
    pub seed: u64,
}

impl Default for InversionConfig {
    fn default() -> Self {
        Self {
            latent_samples: 10_000,
            pose_candidates: 1_000,
            top_k: 5,
            steps: 2_000,
            lr: 4e-3,
            adam: AdamConfig { beta1: 0.9, beta2: 0.999, eps: 1e-8 },
            seed: 0,
        }
    }
}

impl InversionConfig {
    pub fn validate(&self) -> Result<()> {
        if self.latent_samples == 0 || self.pose_candidates == 0 || self.top_k == 0 || !(self.lr > 0.0) {
            return Err(Error::Config(
                "inversion needs latent_samples, pose_candidates and top_k >= 1 and lr > 0".into(),
            ));
        }
        Ok(())
    }
}

/// An observed instance: premultiplied crop, its mask, and where it sits.
#[derive(Clone, Debug, PartialEq)]
pub struct InversionTarget {
    pub rgb: Raster,
    pub mask: Raster,
    /// Camera-frame object center shared by every candidate pose.
    pub translation: Vector3<f64>,
    pub view: Viewport,
}

impl InversionTarget {
    /// Resamples `I ⊙ M` around the unit sphere at `translation`.
    pub fn from_scene(rgb: &Raster, mask: &Raster, translation: Vector3<f64>, camera: &Camera, res: usize) -> Result<Self> {
        let pose = PoseSample { rotation: nalgebra::Matrix3::identity(), translation };
        let view = Viewport::for_pose(&pose, camera, res)?;
        let masked = Raster::from_fn(3, rgb.height(), rgb.width(), |c, y, x| rgb.get(c, y, x) * mask.get(0, y, x));
        Ok(Self {
            rgb: masked.resample_window(view.x0, view.y0, view.side, res, 0.0),
            mask: mask.resample_window(view.x0, view.y0, view.side, res, 0.0),
            translation,
            view,
        })
    }
}

/// Object center for a mask: its bounding-box center back-projected to `distance`.
pub fn translation_from_mask(mask: &Raster, camera: &Camera, distance: f64) -> Result<Vector3<f64>> {
    let (mut x0, mut y0, mut x1, mut y1) = (usize::MAX, usize::MAX, 0, 0);
    for y in 0..mask.height() {
        for x in 0..mask.width() {
            if mask.get(0, y, x) > 0.5 {
                (x0, y0, x1, y1) = (x0.min(x), y0.min(y), x1.max(x + 1), y1.max(y + 1));
            }
        }
    }
    if x0 == usize::MAX {
        return Err(Error::invalid("instance mask is empty"));
    }
    let (u, v) = (0.5 * (x0 + x1) as f64, 0.5 * (y0 + y1) as f64);
    let (cx, cy) = camera.principal_point();
    let f = camera.focal();
    Ok(Vector3::new(distance * (u - cx) / f, distance * (v - cy) / f, distance))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CandidateRecord {
    /// Index into the sampled candidate list.
    pub index: usize,
    pub rotation: [[f64; 3]; 3],
    pub initial_error: f64,
    /// Lowest error along this candidate's refinement trajectory.
    pub final_error: f64,
    /// Step at which `final_error` was reached (0 = the unrefined mean code).
    pub best_step: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct InversionResult {
    pub pose: PoseSample,
    pub latent: LatentCode,
    pub error: f64,
    /// Refined candidates in rank order.
    pub candidates: Vec<CandidateRecord>,
    /// Proxy error of every sampled pose at the mean code, in sampling order.
    pub initial_errors: Vec<f64>,
}

fn rows(m: &nalgebra::Matrix3<f64>) -> [[f64; 3]; 3] {
    std::array::from_fn(|i| std::array::from_fn(|j| m[(i, j)]))
}

/// Deterministic render (no jitter) of `z` at `pose` over `view`.
pub fn render_fixed<M: RenderModel>(
    model: &M,
    z: &LatentCode,
    pose: &PoseSample,
    light: &LightConfig,
    camera: &Camera,
    view: Viewport,
    cfg: &RenderConfig,
) -> Result<(RenderedCrop, RenderPlan)> {
    let rays = build_rays(pose, camera, &view, cfg.bounding_radius);
    let plan = plan_samples(model, z, pose, view, rays, cfg, None::<&mut NoRng>)?;
    let crop = execute_plan(model, z, &plan, light, cfg)?;
    Ok((crop, plan))
}

fn full_mask(res: usize) -> Raster {
    Raster::filled(1, res, res, 1.0)
}

/// Runs Adam on the latent for one fixed pose; returns the best code seen and its error.
#[allow(clippy::too_many_arguments)]
fn refine(
    model: &Generator,
    start: &LatentCode,
    start_error: f64,
    pose: &PoseSample,
    target: &InversionTarget,
    scene: &SceneConfig,
    render: &RenderConfig,
    cfg: &InversionConfig,
) -> Result<(LatentCode, f64, usize)> {
    let mask = full_mask(target.view.res);
    let mut z = start.to_tensor();
    let mut adam = AdamState::new([&z], cfg.adam);
    let (mut best, mut best_err, mut best_step) = (start.clone(), start_error, 0);
    for step in 0..=cfg.steps {
        let code = LatentCode::new(z.data().to_vec());
        let (crop, plan) = render_fixed(model, &code, pose, &scene.light, &scene.camera, target.view, render)?;
        let (err, grad) = recon_proxy_grad(&crop.rgb, &target.rgb, &mask)?;
        if err < best_err {
            (best, best_err, best_step) = (code.clone(), err, step);
        }
        if step == cfg.steps {
            break;
        }
        let seeds = CropSeeds { rgb: Some(grad), mask: None, eikonal: 0.0 };
        let g = backprop_plan(model, &code, &plan, &scene.light, render, &seeds, BindMode::LATENT)?;
        let g = g.latent.ok_or_else(|| Error::invalid("latent gradient missing"))?;
        adam.update(&mut [&mut z], &[g], cfg.lr);
    }
    Ok((best, best_err, best_step))
}

/// Mean-code pose search followed by per-candidate latent refinement.
///
/// The proxy error compares premultiplied crops over the whole crop, so both
/// color and silhouette mismatches count. Translation stays at the target's.
pub fn invert(
    model: &Generator,
    target: &InversionTarget,
    prior: &PosePrior,
    scene: &SceneConfig,
    render: &RenderConfig,
    cfg: &InversionConfig,
) -> Result<InversionResult> {
    cfg.validate()?;
    prior.validate()?;
    let res = target.view.res;
    if target.rgb.dims() != (3, res, res) {
        return Err(Error::invalid(format!("target crop {:?} does not match a {res}px view", target.rgb.dims())));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let z_bar = average_latent(&mut rng, model.latent_dim(), cfg.latent_samples)?;
    let poses: Vec<PoseSample> = (0..cfg.pose_candidates)
        .map(|_| {
            let (e, a, g) = prior.sample_angles(&mut rng);
            PoseSample { rotation: prior.rotation_for(e, a, g, &target.translation), translation: target.translation }
        })
        .collect();
    let mask = full_mask(res);
    let initial_errors: Vec<f64> = poses
        .par_iter()
        .map(|pose| {
            let (crop, _) = render_fixed(model, &z_bar, pose, &scene.light, &scene.camera, target.view, render)?;
            recon_proxy_error(&crop.rgb, &target.rgb, &mask)
        })
        .collect::<Result<_>>()?;
    let mut order: Vec<usize> = (0..poses.len()).collect();
    order.sort_by(|&a, &b| initial_errors[a].total_cmp(&initial_errors[b]).then(a.cmp(&b)));
    order.truncate(cfg.top_k);

    let refined: Vec<(LatentCode, f64, usize)> = order
        .par_iter()
        .map(|&i| refine(model, &z_bar, initial_errors[i], &poses[i], target, scene, render, cfg))
        .collect::<Result<_>>()?;
    let candidates: Vec<CandidateRecord> = order
        .iter()
        .zip(&refined)
        .map(|(&i, (_, err, step))| CandidateRecord {
            index: i,
            rotation: rows(&poses[i].rotation),
            initial_error: initial_errors[i],
            final_error: *err,
            best_step: *step,
        })
        .collect();
    let winner = (0..refined.len()).min_by(|&a, &b| refined[a].1.total_cmp(&refined[b].1).then(a.cmp(&b))).expect("top_k >= 1");
    Ok(InversionResult {
        pose: poses[order[winner]],
        latent: refined[winner].0.clone(),
        error: refined[winner].1,
        candidates,
        initial_errors,
    })
}

/// Renders `z` from each pose, each over its own unit-sphere viewport.
pub fn novel_views<M: RenderModel>(
    model: &M,
    z: &LatentCode,
    poses: &[PoseSample],
    scene: &SceneConfig,
    res: usize,
    render: &RenderConfig,
) -> Result<Vec<RenderedCrop>> {
    poses
        .iter()
        .map(|pose| {
            let view = Viewport::for_pose(pose, &scene.camera, res)?;
            Ok(render_fixed(model, z, pose, &scene.light, &scene.camera, view, render)?.0)
        })
        .collect()
}

/// Renders one pose under several lights; the sample plan is shared, so only shading changes.
pub fn relight<M: RenderModel>(
    model: &M,
    z: &LatentCode,
    pose: &PoseSample,
    lights: &[LightConfig],
    camera: &Camera,
    view: Viewport,
    render: &RenderConfig,
) -> Result<Vec<RenderedCrop>> {
    let rays = build_rays(pose, camera, &view, render.bounding_radius);
    let plan = plan_samples(model, z, pose, view, rays, render, None::<&mut NoRng>)?;
    lights.iter().map(|light| execute_plan(model, z, &plan, light, render)).collect()
}

/// Poses at `frames` evenly spaced azimuths over a full turn; the last frame
/// wraps to exactly the first.
pub fn azimuth_sweep(
    prior: &PosePrior,
    elevation: f64,
    inplane: f64,
    translation: Vector3<f64>,
    frames: usize,
) -> Result<Vec<PoseSample>> {
    if frames < 2 {
        return Err(Error::invalid("an azimuth sweep needs at least two frames"));
    }
    Ok((0..frames)
        .map(|i| {
            let a = (360.0 * i as f64 / (frames - 1) as f64) % 360.0;
            PoseSample { rotation: prior.rotation_for(elevation, a, inplane, &translation), translation }
        })
        .collect())
}

/// `(1 - t) a + t b`, exact at both ends.
pub fn lerp_latent(a: &LatentCode, b: &LatentCode, t: f64) -> LatentCode {
    LatentCode::new(a.values().iter().zip(b.values()).map(|(x, y)| (1.0 - t) * x + t * y).collect())
}

/// Renders `steps` evenly spaced codes from `z_a` to `z_b` at one pose and light.
#[allow(clippy::too_many_arguments)]
pub fn interpolate_latents<M: RenderModel>(
    model: &M,
    z_a: &LatentCode,
    z_b: &LatentCode,
    steps: usize,
    pose: &PoseSample,
    scene: &SceneConfig,
    res: usize,
    render: &RenderConfig,
) -> Result<Vec<RenderedCrop>> {
    if steps < 2 {
        return Err(Error::invalid("interpolation needs at least two steps"));
    }
    if z_a.dim() != z_b.dim() {
        return Err(Error::invalid("latent codes differ in dimension"));
    }
    let view = Viewport::for_pose(pose, &scene.camera, res)?;
    (0..steps)
        .map(|i| {
            let z = lerp_latent(z_a, z_b, i as f64 / (steps - 1) as f64);
            Ok(render_fixed(model, &z, pose, &scene.light, &scene.camera, view, render)?.0)
        })
        .collect()
}

/// Draws `n` latent codes with a seeded generator.
pub fn sample_latents(dim: usize, n: usize, rng: &mut impl Rng) -> Vec<LatentCode> {
    (0..n).map(|_| crate::fields::sample_latent(rng, dim)).collect()
}
