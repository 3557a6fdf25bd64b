//! Synthetic multi-instance scenes rendered from analytic objects, with ground-truth intrinsics.

use std::fs;
use std::path::Path;

use nalgebra::Vector3;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::components::InstanceMask;
use super::io::{load_gray, load_pgm16, load_rgb, save_pgm16, save_png};
use super::SceneConfig;
use crate::error::{Error, Result};
use crate::fields::analytic::{AnalyticObject, BandAlbedo, Shape};
use crate::fields::LatentCode;
use crate::model::AnalyticModel;
use crate::raster::Raster;
use crate::render::{
    crop_window, render_view, surface_maps, Camera, PosePrior, PoseSample, RenderConfig, RenderedCrop, Viewport,
};
use crate::shading::{LightConfig, PhongParams};

/// Multiplier from depth units to 16-bit PGM values.
pub const DEPTH_SCALE: f64 = 500.0;
/// Rendered-mask level above which a pixel belongs to an instance.
pub const MASK_THRESHOLD: f64 = 0.5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub shape: Shape,
    pub albedo: BandAlbedo,
    pub phong: PhongParams,
    /// Logistic sharpness used for the ground-truth renders.
    pub sharpness: f64,
    pub instances: usize,
    /// Per-instance scale is drawn uniformly from `[1 - radius_jitter, 1]`.
    pub radius_jitter: f64,
    /// Square scene image side in pixels.
    pub image_size: usize,
    pub fov_deg: f64,
    /// Depth of every instance center along the optical axis.
    pub distance: f64,
    /// Orientation ranges; distance and lateral offsets come from the grid layout instead.
    pub prior: PosePrior,
    /// Camera-frame light; the relit ground truth mirrors it left to right.
    pub light: LightConfig,
    /// Azimuth offset of the held-out novel view.
    pub novel_azimuth_deg: f64,
    pub background: [f64; 3],
    pub render: RenderConfig,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            shape: Shape::Sphere { radius: 1.0 },
            albedo: BandAlbedo { base: [0.6, 0.25, 0.15], accent: [0.15, 0.4, 0.6], frequency: 3.0 },
            phong: PhongParams::default(),
            sharpness: 50.0,
            instances: 36,
            radius_jitter: 0.2,
            image_size: 384,
            fov_deg: 10.0,
            distance: 78.0,
            prior: PosePrior::default(),
            light: LightConfig::new([-0.5, -0.6, -1.0]).expect("nonzero"),
            novel_azimuth_deg: 90.0,
            background: [0.0; 3],
            render: RenderConfig::default(),
        }
    }
}

impl SynthConfig {
    pub fn camera(&self) -> Camera {
        Camera { fov_deg: self.fov_deg, width: self.image_size, height: self.image_size }
    }

    pub fn validate(&self) -> Result<()> {
        self.shape.validate()?;
        self.albedo.validate()?;
        self.prior.validate()?;
        self.render.validate()?;
        self.camera().validate()?;
        if self.instances == 0 || !(0.0..1.0).contains(&self.radius_jitter) || !(self.distance > 1.0) {
            return Err(Error::Config(format!(
                "synthetic scene needs instances >= 1, radius_jitter in [0, 1) and distance > 1 (got {}, {}, {})",
                self.instances, self.radius_jitter, self.distance
            )));
        }
        Ok(())
    }
}

/// Integer-aligned square viewport covering the unit-sphere window of `pose`.
pub fn aligned_viewport(pose: &PoseSample, camera: &Camera) -> Result<Viewport> {
    let w = crop_window(pose, camera)?;
    let side = w.width().max(w.height());
    Ok(Viewport { x0: w.x0 as f64, y0: w.y0 as f64, side: side as f64, res: side as usize })
}

/// Ground truth for one instance; crops are at the viewport's native resolution.
#[derive(Clone, Debug, PartialEq)]
pub struct GroundTruth {
    pub scale: f64,
    pub pose: PoseSample,
    pub novel_pose: PoseSample,
    pub view: Viewport,
    /// Full-frame binary mask.
    pub mask: Raster,
    pub depth: Raster,
    /// Camera-frame unit normals.
    pub normal: Raster,
    pub albedo: Raster,
    /// Premultiplied render under the mirrored light.
    pub relit: Raster,
    /// Premultiplied render from the novel pose, over `novel_view`.
    pub novel: Raster,
    pub novel_view: Viewport,
    /// Binary mask of the novel render, over `novel_view`.
    pub novel_mask: Raster,
}

impl GroundTruth {
    /// The full-frame mask restricted to `view`.
    pub fn crop_mask(&self) -> Raster {
        window(&self.mask, &self.view)
    }
}

fn window(full: &Raster, v: &Viewport) -> Raster {
    Raster::from_fn(full.channels(), v.res, v.res, |c, y, x| {
        let (fy, fx) = (v.y0 as usize + y, v.x0 as usize + x);
        if fy < full.height() && fx < full.width() {
            full.get(c, fy, fx)
        } else {
            0.0
        }
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthScene {
    pub config: SynthConfig,
    pub rgb: Raster,
    pub instances: Vec<GroundTruth>,
}

impl SynthConfig {
    pub fn object(&self, scale: f64) -> Result<AnalyticModel> {
        let object = AnalyticObject::new(self.shape.clone(), self.albedo.clone(), scale)?;
        AnalyticModel::new(object, self.phong, self.sharpness)
    }

    /// Scene config to train on this scene: same camera and light, orientation
    /// ranges from the prior, distance fixed, lateral range covering the grid.
    pub fn scene_config(&self) -> SceneConfig {
        let camera = self.camera();
        let half = 0.5 * self.image_size as f64;
        let lateral = self.distance * (half - grid_cell(self.image_size, self.instances).0 as f64 * 0.5) / camera.focal();
        SceneConfig {
            camera,
            light: self.light,
            prior: PosePrior { distance: [self.distance; 2], lateral: [-lateral, lateral], ..self.prior.clone() },
        }
    }
}

/// Cell side and column count of the square grid holding `k` instances.
fn grid_cell(image_size: usize, k: usize) -> (usize, usize) {
    let cols = (k as f64).sqrt().ceil() as usize;
    (image_size / cols.max(1), cols)
}

fn render_premultiplied(
    model: &AnalyticModel,
    pose: &PoseSample,
    light: &LightConfig,
    camera: &Camera,
    cfg: &SynthConfig,
) -> Result<(RenderedCrop, crate::render::RenderPlan)> {
    let view = aligned_viewport(pose, camera)?;
    render_view(model, &LatentCode::zeros(1), pose, light, camera, view, &cfg.render, None::<&mut rand_chacha::ChaCha8Rng>)
}

/// Renders one instance and its ground-truth maps; deterministic in its inputs.
pub fn render_instance(
    cfg: &SynthConfig,
    scale: f64,
    pose: &PoseSample,
    novel_pose: &PoseSample,
) -> Result<(GroundTruth, RenderedCrop)> {
    let camera = cfg.camera();
    let n = cfg.image_size;
    let model = cfg.object(scale)?;
    let (crop, plan) = render_premultiplied(&model, pose, &cfg.light, &camera, cfg)?;
    let maps = surface_maps(&model, &LatentCode::zeros(1), &plan, &crop, MASK_THRESHOLD)?;
    let (relit, _) = render_premultiplied(&model, pose, &cfg.light.mirrored_x(), &camera, cfg)?;
    let (novel, novel_plan) = render_premultiplied(&model, novel_pose, &cfg.light, &camera, cfg)?;
    let novel_mask = novel.mask.map(|m| f64::from(m > MASK_THRESHOLD));
    let view = plan.view;
    let mut mask = Raster::zeros(1, n, n);
    for y in 0..view.res {
        for x in 0..view.res {
            let (fy, fx) = (view.y0 as usize + y, view.x0 as usize + x);
            if fy < n && fx < n && maps.mask.get(0, y, x) > 0.0 {
                mask.set(0, fy, fx, 1.0);
            }
        }
    }
    let gt = GroundTruth {
        scale,
        pose: *pose,
        novel_pose: *novel_pose,
        view,
        mask,
        depth: maps.depth,
        normal: maps.normal,
        albedo: maps.albedo,
        relit: relit.rgb,
        novel: novel.rgb,
        novel_view: novel_plan.view,
        novel_mask,
    };
    Ok((gt, crop))
}

/// Places `cfg.instances` randomly oriented, randomly scaled copies of the
/// analytic object on a grid and renders the scene with the volume renderer.
pub fn synth_scene_generate(cfg: &SynthConfig, rng: &mut impl Rng) -> Result<SynthScene> {
    cfg.validate()?;
    let camera = cfg.camera();
    let (cell, cols) = grid_cell(cfg.image_size, cfg.instances);
    let rows = cfg.instances.div_ceil(cols);
    let n = cfg.image_size;
    let (ox, oy) = ((n - cols * cell) / 2, (n - rows * cell) / 2);
    let f = camera.focal();
    let (cx, cy) = camera.principal_point();

    struct Placement {
        scale: f64,
        pose: PoseSample,
        novel_pose: PoseSample,
    }
    let mut placements = Vec::with_capacity(cfg.instances);
    for k in 0..cfg.instances {
        let (row, col) = (k / cols, k % cols);
        let u = (ox + col * cell) as f64 + 0.5 * cell as f64;
        let v = (oy + row * cell) as f64 + 0.5 * cell as f64;
        let t = Vector3::new(cfg.distance * (u - cx) / f, cfg.distance * (v - cy) / f, cfg.distance);
        let (e, a, g) = cfg.prior.sample_angles(rng);
        let pose = PoseSample { rotation: cfg.prior.rotation_for(e, a, g, &t), translation: t };
        let novel_pose =
            PoseSample { rotation: cfg.prior.rotation_for(e, a + cfg.novel_azimuth_deg, g, &t), translation: t };
        let w = crop_window(&pose, &camera)?;
        let cell_x = (ox + col * cell) as i64;
        let cell_y = (oy + row * cell) as i64;
        if w.x0 < cell_x || w.y0 < cell_y || w.x1 > cell_x + cell as i64 || w.y1 > cell_y + cell as i64 {
            return Err(Error::Config(format!(
                "grid overflow: {} instances need {cell}px cells but an instance spans {}x{}px",
                cfg.instances,
                w.width(),
                w.height()
            )));
        }
        let scale = 1.0 - cfg.radius_jitter * rng.gen::<f64>();
        placements.push(Placement { scale, pose, novel_pose });
    }

    let rendered: Vec<Result<(GroundTruth, RenderedCrop)>> =
        placements.par_iter().map(|p| render_instance(cfg, p.scale, &p.pose, &p.novel_pose)).collect();

    let mut rgb = Raster::from_fn(3, n, n, |c, _, _| cfg.background[c]);
    let mut instances = Vec::with_capacity(cfg.instances);
    for r in rendered {
        let (gt, crop) = r?;
        let v = gt.view;
        for y in 0..v.res {
            for x in 0..v.res {
                let (fy, fx) = (v.y0 as usize + y, v.x0 as usize + x);
                if fy >= n || fx >= n {
                    continue;
                }
                let m = crop.mask.get(0, y, x);
                for c in 0..3 {
                    let under = rgb.get(c, fy, fx);
                    rgb.set(c, fy, fx, crop.rgb.get(c, y, x) + (1.0 - m) * under);
                }
            }
        }
        instances.push(gt);
    }
    Ok(SynthScene { config: cfg.clone(), rgb, instances })
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct InstanceMeta {
    scale: f64,
    view: [f64; 3],
    novel_view: [f64; 3],
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Meta {
    config: SynthConfig,
    depth_scale: f64,
    instances: Vec<InstanceMeta>,
}

fn write_pose(pose: &PoseSample, path: &Path) -> Result<()> {
    let text: Vec<String> = pose.to_rows().iter().map(|v| format!("{v:e}")).collect();
    fs::write(path, text.join(" ") + "\n").map_err(|e| Error::io(path, e))
}

fn read_pose(path: &Path) -> Result<PoseSample> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let values: Vec<f64> = text
        .split_whitespace()
        .map(|t| t.parse().map_err(|_| Error::invalid(format!("{}: bad number {t:?}", path.display()))))
        .collect::<Result<_>>()?;
    PoseSample::from_rows(&values)
}

/// Maps unit vectors from `[-1, 1]` to `[0, 1]` for 8-bit storage.
pub fn encode_normals(n: &Raster) -> Raster {
    n.map(|v| 0.5 * (v + 1.0))
}

pub fn decode_normals(r: &Raster) -> Raster {
    r.map(|v| 2.0 * v - 1.0)
}

fn view_triple(v: &Viewport) -> [f64; 3] {
    [v.x0, v.y0, v.side]
}

fn view_from(t: [f64; 3]) -> Viewport {
    Viewport { x0: t[0], y0: t[1], side: t[2], res: t[2] as usize }
}

impl SynthScene {
    /// Writes the dataset layout:
    ///
    /// ```text
    /// scene.png, scene.toml, mask_<k>.png
    /// gt/meta.json, gt/depth_scale.txt
    /// gt/pose_<k>.txt, gt/novel_pose_<k>.txt   row-major [R | t], 12 numbers
    /// gt/depth_<k>.pgm                          16-bit, value = depth * DEPTH_SCALE
    /// gt/normal_<k>.png                         camera-frame normals, [-1, 1] -> [0, 255]
    /// gt/albedo_<k>.png, gt/relit_<k>.png, gt/novel_<k>.png, gt/novel_mask_<k>.png
    /// ```
    pub fn write(&self, dir: &Path) -> Result<()> {
        let gt_dir = dir.join("gt");
        fs::create_dir_all(&gt_dir).map_err(|e| Error::io(&gt_dir, e))?;
        save_png(&self.rgb, &dir.join("scene.png"))?;
        let scene_cfg = toml::to_string(&self.config.scene_config()).map_err(|e| Error::Config(e.to_string()))?;
        let p = dir.join("scene.toml");
        fs::write(&p, scene_cfg).map_err(|e| Error::io(&p, e))?;
        let mut metas = Vec::new();
        for (k, gt) in self.instances.iter().enumerate() {
            save_png(&gt.mask, &dir.join(format!("mask_{k}.png")))?;
            write_pose(&gt.pose, &gt_dir.join(format!("pose_{k}.txt")))?;
            write_pose(&gt.novel_pose, &gt_dir.join(format!("novel_pose_{k}.txt")))?;
            save_pgm16(&gt.depth, DEPTH_SCALE, &gt_dir.join(format!("depth_{k}.pgm")))?;
            save_png(&encode_normals(&gt.normal), &gt_dir.join(format!("normal_{k}.png")))?;
            save_png(&gt.albedo, &gt_dir.join(format!("albedo_{k}.png")))?;
            save_png(&gt.relit, &gt_dir.join(format!("relit_{k}.png")))?;
            save_png(&gt.novel, &gt_dir.join(format!("novel_{k}.png")))?;
            save_png(&gt.novel_mask, &gt_dir.join(format!("novel_mask_{k}.png")))?;
            metas.push(InstanceMeta {
                scale: gt.scale,
                view: view_triple(&gt.view),
                novel_view: view_triple(&gt.novel_view),
            });
        }
        let meta = Meta { config: self.config.clone(), depth_scale: DEPTH_SCALE, instances: metas };
        let p = gt_dir.join("meta.json");
        let text = serde_json::to_string_pretty(&meta).map_err(|e| Error::Config(e.to_string()))?;
        fs::write(&p, text).map_err(|e| Error::io(&p, e))?;
        let p = gt_dir.join("depth_scale.txt");
        fs::write(&p, format!("{DEPTH_SCALE}\n")).map_err(|e| Error::io(&p, e))
    }
}

/// A synthetic dataset read back from disk, values quantized as stored.
#[derive(Clone, Debug)]
pub struct SynthDataset {
    pub config: SynthConfig,
    pub rgb: Raster,
    pub masks: Vec<InstanceMask>,
    pub instances: Vec<GroundTruth>,
}

impl SynthDataset {
    pub fn load(dir: &Path) -> Result<Self> {
        let gt_dir = dir.join("gt");
        let p = gt_dir.join("meta.json");
        let text = fs::read_to_string(&p).map_err(|e| Error::io(&p, e))?;
        let meta: Meta = serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", p.display())))?;
        let rgb = load_rgb(&dir.join("scene.png"))?;
        let mut masks = Vec::new();
        let mut instances = Vec::new();
        for (k, m) in meta.instances.iter().enumerate() {
            let mask = load_gray(&dir.join(format!("mask_{k}.png")))?;
            masks.push(InstanceMask::from_mask(&mask)?);
            instances.push(GroundTruth {
                scale: m.scale,
                pose: read_pose(&gt_dir.join(format!("pose_{k}.txt")))?,
                novel_pose: read_pose(&gt_dir.join(format!("novel_pose_{k}.txt")))?,
                view: view_from(m.view),
                mask,
                depth: load_pgm16(&gt_dir.join(format!("depth_{k}.pgm")), meta.depth_scale)?,
                normal: decode_normals(&load_rgb(&gt_dir.join(format!("normal_{k}.png")))?),
                albedo: load_rgb(&gt_dir.join(format!("albedo_{k}.png")))?,
                relit: load_rgb(&gt_dir.join(format!("relit_{k}.png")))?,
                novel: load_rgb(&gt_dir.join(format!("novel_{k}.png")))?,
                novel_view: view_from(m.novel_view),
                novel_mask: load_gray(&gt_dir.join(format!("novel_mask_{k}.png")))?,
            });
        }
        Ok(Self { config: meta.config, rgb, masks, instances })
    }
}
