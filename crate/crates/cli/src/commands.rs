use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::Vector3;
use objint_core::fields::analytic::Shape;
use objint_core::fields::{sample_latent, LatentCode};
use objint_core::inference::eval::{evaluate_synthetic, EvalConfig};
use objint_core::inference::{
    azimuth_sweep, interpolate_latents, invert as invert_instance, novel_views, relight as relight_crop, render_fixed,
    translation_from_mask, CandidateRecord, InversionTarget,
};
use objint_core::render::{surface_maps, PoseSample, RenderedCrop, SurfaceMaps, Viewport};
use objint_core::scene::io::{load_rgb, save_pgm16, save_png};
use objint_core::scene::synth::encode_normals;
use objint_core::scene::{mask_files, synth_scene_generate, SceneConfig, SceneImage, SynthDataset};
use objint_core::training::{Checkpoint, LossLog, Trainer};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::{echo, resolve, RunConfig};
use crate::{Common, Failure};

type Res = Result<(), Failure>;

fn io_fail(path: &Path, e: impl std::fmt::Display) -> Failure {
    Failure::io(format!("{}: {e}", path.display()))
}

fn prepare(common: &Common, scene_toml: Option<&Path>) -> Result<RunConfig, Failure> {
    let cfg = resolve(scene_toml, common.config.as_deref(), &common.sets, common.seed)?;
    fs::create_dir_all(&common.out).map_err(|e| io_fail(&common.out, e))?;
    Ok(cfg)
}

fn write_json<T: Serialize>(value: &T, path: &Path) -> Res {
    let text = serde_json::to_string_pretty(value).map_err(|e| Failure::usage(e.to_string()))?;
    fs::write(path, text + "\n").map_err(|e| io_fail(path, e))
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T, Failure> {
    let text = fs::read_to_string(path).map_err(|e| io_fail(path, e))?;
    serde_json::from_str(&text).map_err(|e| Failure::usage(format!("{}: {e}", path.display())))
}

fn mid(r: [f64; 2]) -> f64 {
    0.5 * (r[0] + r[1])
}

/// Image path, mask directory and scene config found at `scene`.
fn scene_paths(scene: &Path, masks: Option<&Path>) -> (PathBuf, Option<PathBuf>, Option<PathBuf>) {
    if scene.is_dir() {
        let toml = scene.join("scene.toml");
        let masks = masks.map(Path::to_path_buf).or_else(|| mask_files(scene).is_ok().then(|| scene.to_path_buf()));
        (scene.join("scene.png"), masks, toml.exists().then_some(toml))
    } else {
        (scene.to_path_buf(), masks.map(Path::to_path_buf), None)
    }
}

fn load_scene(image: &Path, masks: Option<&Path>, cfg: &RunConfig) -> Result<SceneImage, Failure> {
    Ok(match masks {
        Some(dir) => SceneImage::load(image, dir)?,
        None => {
            let min_area = (cfg.segment.min_area > 0).then_some(cfg.segment.min_area);
            SceneImage::segment(load_rgb(image)?, cfg.segment.threshold, min_area)?
        }
    })
}

fn load_trainer(path: &Path) -> Result<Trainer, Failure> {
    Ok(Checkpoint::load(path)?.into_trainer(None, false)?)
}

/// Object center on the optical axis at the prior's mean distance.
fn default_pose(scene: &SceneConfig) -> PoseSample {
    let p = &scene.prior;
    let t = Vector3::new(0.0, 0.0, mid(p.distance));
    PoseSample { rotation: p.rotation_for(mid(p.elevation_deg), mid(p.azimuth_deg), mid(p.inplane_deg), &t), translation: t }
}

fn save_crop(crop: &RenderedCrop, out: &Path, stem: &str) -> Res {
    save_png(&crop.rgb, &out.join(format!("{stem}.png")))?;
    save_png(&crop.mask, &out.join(format!("{stem}_mask.png")))?;
    Ok(())
}

fn save_maps(maps: &SurfaceMaps, out: &Path) -> Res {
    let max = maps.depth.data().iter().copied().fold(0.0, f64::max);
    let scale = if max > 0.0 { (u16::MAX as f64 / max).floor() } else { 1.0 };
    save_pgm16(&maps.depth, scale, &out.join("depth.pgm"))?;
    let p = out.join("depth_scale.txt");
    fs::write(&p, format!("{scale}\n")).map_err(|e| io_fail(&p, e))?;
    save_png(&encode_normals(&maps.normal), &out.join("normal.png"))?;
    save_png(&maps.albedo, &out.join("albedo.png"))?;
    save_png(&maps.mask, &out.join("mask.png"))?;
    Ok(())
}

pub fn synth(common: &Common, k: Option<usize>, object: Option<&str>) -> Res {
    let mut cfg = prepare(common, None)?;
    if let Some(k) = k {
        cfg.synth.instances = k;
    }
    if let Some(name) = object {
        cfg.synth.shape = match name {
            "sphere" => Shape::Sphere { radius: 1.0 },
            "ellipsoid" => Shape::Ellipsoid { radii: [1.0, 0.7, 0.8] },
            "union" => Shape::SphereUnion { spheres: vec![([0.0, -0.3, 0.0], 0.65), ([0.0, 0.45, 0.0], 0.45)] },
            other => return Err(Failure::usage(format!("unknown object {other:?}; expected sphere, ellipsoid or union"))),
        };
    }
    echo(&cfg, &common.out)?;
    let scene = synth_scene_generate(&cfg.synth, &mut ChaCha8Rng::seed_from_u64(cfg.seed))?;
    scene.write(&common.out)?;
    println!("wrote {} instances to {}", scene.instances.len(), common.out.display());
    Ok(())
}

#[derive(Serialize)]
struct SegmentRecord {
    mask: String,
    pixels: usize,
    bbox: [usize; 4],
}

pub fn segment(common: &Common, scene: &Path) -> Res {
    let cfg = prepare(common, None)?;
    echo(&cfg, &common.out)?;
    let (image, _, _) = scene_paths(scene, None);
    let img = load_scene(&image, None, &cfg)?;
    let mut records = Vec::new();
    for (k, inst) in img.instances.iter().enumerate() {
        let name = format!("mask_{k}.png");
        save_png(&inst.mask, &common.out.join(&name))?;
        let b = inst.bbox;
        records.push(SegmentRecord { mask: name, pixels: inst.area, bbox: [b.x0, b.y0, b.x1, b.y1] });
    }
    write_json(&records, &common.out.join("segments.json"))?;
    println!("{} instances", records.len());
    Ok(())
}

pub fn train(common: &Common, scene: &Path, masks: Option<&Path>, resume: Option<&Path>, force: bool) -> Res {
    let (image, masks, toml) = scene_paths(scene, masks);
    let cfg = prepare(common, toml.as_deref())?;
    echo(&cfg, &common.out)?;
    let img = load_scene(&image, masks.as_deref(), &cfg)?;
    let crops = img.crops(cfg.train.resolution)?;
    log::info!("{} instances, crop side {}px", crops.len(), crops.side);
    let log_path = common.out.join("losses.jsonl");
    let mut trainer = match resume {
        Some(p) => Checkpoint::load(p)?.into_trainer(Some((&cfg.train, &cfg.scene)), force)?,
        None => {
            if log_path.exists() {
                fs::remove_file(&log_path).map_err(|e| io_fail(&log_path, e))?;
            }
            Trainer::new(cfg.train.clone(), cfg.scene.clone())?
        }
    };
    let mut log = LossLog::open(&log_path)?;
    let ck_path = common.out.join("checkpoint.bin");
    let total = cfg.train.iterations;
    while trainer.step < total {
        let remaining = total - trainer.step;
        let chunk = match cfg.checkpoint_every {
            0 => remaining,
            every => (every - trainer.step % every).min(remaining),
        };
        let reports = trainer.train(&crops, chunk, Some(&mut log))?;
        Checkpoint::from_trainer(&trainer).save(&ck_path)?;
        if let Some(r) = reports.last() {
            log::info!(
                "step {}: adversarial {:.4} mask {:.4} pose {:.4} eikonal {:.4} r1 {:.4}",
                trainer.step, r.adversarial, r.mask, r.pose, r.eikonal, r.r1
            );
        }
    }
    Checkpoint::from_trainer(&trainer).save(&ck_path)?;
    println!("trained to step {} -> {}", trainer.step, ck_path.display());
    Ok(())
}

#[derive(Serialize, Deserialize)]
struct LatentFile {
    latent: Vec<f64>,
}

pub fn render(common: &Common, checkpoint: &Path) -> Res {
    let cfg = prepare(common, None)?;
    echo(&cfg, &common.out)?;
    let t = load_trainer(checkpoint)?;
    let scene = &t.scene;
    let render = &t.config.render;
    let z = sample_latent(&mut ChaCha8Rng::seed_from_u64(cfg.seed), t.generator.latent_dim());
    let base = default_pose(scene);
    let p = &scene.prior;
    let poses = azimuth_sweep(p, mid(p.elevation_deg), mid(p.inplane_deg), base.translation, cfg.views.frames)?;
    let frames = novel_views(&t.generator, &z, &poses, scene, cfg.views.resolution, render)?;
    for (i, f) in frames.iter().enumerate() {
        save_crop(f, &common.out, &format!("frame_{i:03}"))?;
    }
    let view = Viewport::for_pose(&poses[0], &scene.camera, cfg.views.resolution)?;
    let (crop, plan) = render_fixed(&t.generator, &z, &poses[0], &scene.light, &scene.camera, view, render)?;
    save_maps(&surface_maps(&t.generator, &z, &plan, &crop, 0.5)?, &common.out)?;
    write_json(&LatentFile { latent: z.values().to_vec() }, &common.out.join("latent.json"))?;
    println!("wrote {} frames to {}", frames.len(), common.out.display());
    Ok(())
}

#[derive(Serialize, Deserialize)]
struct InversionFile {
    instance: usize,
    rotation: [[f64; 3]; 3],
    translation: [f64; 3],
    latent: Vec<f64>,
    error: f64,
    candidates: Vec<CandidateRecord>,
    initial_errors: Vec<f64>,
}

impl InversionFile {
    fn pose(&self) -> Result<PoseSample, Failure> {
        Ok(PoseSample::from_parts(self.rotation, self.translation)?)
    }
}

pub fn invert(common: &Common, checkpoint: &Path, scene: &Path, masks: Option<&Path>, instance: usize) -> Res {
    let (image, masks, _) = scene_paths(scene, masks);
    let cfg = prepare(common, None)?;
    echo(&cfg, &common.out)?;
    let t = load_trainer(checkpoint)?;
    let img = load_scene(&image, masks.as_deref(), &cfg)?;
    let inst = img
        .instances
        .get(instance)
        .ok_or_else(|| Failure::usage(format!("instance {instance} of {} does not exist", img.instances.len())))?;
    let sc = &t.scene;
    let translation = translation_from_mask(&inst.mask, &sc.camera, mid(sc.prior.distance))?;
    let target = InversionTarget::from_scene(&img.rgb, &inst.mask, translation, &sc.camera, t.config.resolution)?;
    let result = invert_instance(&t.generator, &target, &sc.prior, sc, &t.config.render, &cfg.inversion)?;
    let (recon, _) =
        render_fixed(&t.generator, &result.latent, &result.pose, &sc.light, &sc.camera, target.view, &t.config.render)?;
    save_png(&target.rgb, &common.out.join("target.png"))?;
    save_png(&recon.rgb, &common.out.join("recon.png"))?;
    let rot = result.pose.rotation;
    let file = InversionFile {
        instance,
        rotation: std::array::from_fn(|i| std::array::from_fn(|j| rot[(i, j)])),
        translation: result.pose.translation.into(),
        latent: result.latent.values().to_vec(),
        error: result.error,
        candidates: result.candidates,
        initial_errors: result.initial_errors,
    };
    write_json(&file, &common.out.join("inversion.json"))?;
    println!("instance {instance}: proxy error {:.4}", file.error);
    Ok(())
}

fn code_and_pose(
    file: Option<&Path>,
    t: &Trainer,
    rng: &mut ChaCha8Rng,
) -> Result<(LatentCode, PoseSample), Failure> {
    match file {
        Some(p) => {
            let f: InversionFile = read_json(p)?;
            if f.latent.len() != t.generator.latent_dim() {
                return Err(Failure::usage(format!("{}: latent size does not match the checkpoint", p.display())));
            }
            Ok((LatentCode::new(f.latent.clone()), f.pose()?))
        }
        None => Ok((sample_latent(rng, t.generator.latent_dim()), default_pose(&t.scene))),
    }
}

pub fn relight(common: &Common, checkpoint: &Path, inversion: Option<&Path>) -> Res {
    let cfg = prepare(common, None)?;
    echo(&cfg, &common.out)?;
    let t = load_trainer(checkpoint)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let (z, pose) = code_and_pose(inversion, &t, &mut rng)?;
    let view = Viewport::for_pose(&pose, &t.scene.camera, cfg.views.resolution)?;
    let mut lights = vec![t.scene.light];
    lights.extend(cfg.views.lights.iter().copied());
    let crops = relight_crop(&t.generator, &z, &pose, &lights, &t.scene.camera, view, &t.config.render)?;
    for (i, c) in crops.iter().enumerate() {
        save_png(&c.rgb, &common.out.join(format!("relit_{i:02}.png")))?;
    }
    let dirs: Vec<[f64; 3]> = lights.iter().map(|l| l.direction()).collect();
    write_json(&dirs, &common.out.join("lights.json"))?;
    println!("wrote {} relit images (index 0 uses the training light)", crops.len());
    Ok(())
}

pub fn interpolate(common: &Common, checkpoint: &Path, from: Option<&Path>, to: Option<&Path>) -> Res {
    let cfg = prepare(common, None)?;
    echo(&cfg, &common.out)?;
    let t = load_trainer(checkpoint)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let (za, pose) = code_and_pose(from, &t, &mut rng)?;
    let (zb, _) = code_and_pose(to, &t, &mut rng)?;
    let frames = interpolate_latents(
        &t.generator,
        &za,
        &zb,
        cfg.views.interpolation_steps,
        &pose,
        &t.scene,
        cfg.views.resolution,
        &t.config.render,
    )?;
    for (i, f) in frames.iter().enumerate() {
        save_png(&f.rgb, &common.out.join(format!("interp_{i:02}.png")))?;
    }
    println!("wrote {} frames", frames.len());
    Ok(())
}

pub fn eval(common: &Common, checkpoint: &Path, scene: &Path) -> Res {
    let cfg = prepare(common, None)?;
    echo(&cfg, &common.out)?;
    let t = load_trainer(checkpoint)?;
    let data = SynthDataset::load(scene)?;
    let ecfg = EvalConfig { resolution: cfg.eval.resolution, limit: cfg.eval.limit, inversion: cfg.inversion.clone() };
    let report = evaluate_synthetic(&t.generator, &data, &t.config.render, &ecfg)?;
    report.write_jsonl(&common.out.join("metrics.jsonl"))?;
    println!("{}", serde_json::to_string(&report.aggregate).map_err(|e| Failure::usage(e.to_string()))?);
    Ok(())
}
