//! The four-term adversarial objective, alternating updates, checkpoints and the loss log.

pub mod adam;
pub mod checkpoint;

use std::fs::OpenOptions;
use std::io::Write;
use std::path::Path;

use log::debug;
use objint_autodiff::{Tape, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub use adam::{AdamConfig, AdamState, StepOutcome};
pub use checkpoint::{Checkpoint, FORMAT_VERSION};

use crate::adversarial::augment::{AugmentParams, AugmentTransform};
use crate::adversarial::discriminator::{Discriminator, DiscriminatorConfig};
use crate::adversarial::{discriminator_loss, generator_loss, pose_loss_tape, r1_penalty};
use crate::error::{Error, Result};
use crate::fields::{random_points, sample_latent, sphere_init_pretrain, FieldConfig, LatentCode, PretrainConfig};
use crate::model::{BindMode, Generator};
use crate::raster::Raster;
use crate::render::{
    backprop_plan, build_rays, eikonal_backprop, execute_plan, plan_samples, CropSeeds, PoseSample, RenderConfig, RenderPlan,
    Viewport,
};
use crate::scene::{composite_background, CropSet, SceneConfig};

/// Half-extent of the cube holding the uniform eikonal samples.
const EIKONAL_EXTENT: f64 = 1.5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    /// Side of the square crops seen by both discriminators.
    pub resolution: usize,
    pub batch_size: usize,
    pub iterations: u64,
    pub seed: u64,
    pub lambda_reg: f64,
    pub lambda_eikonal: f64,
    pub lambda_pose: f64,
    pub lambda_mask: f64,
    pub lr_generator: f64,
    pub lr_discriminator: f64,
    pub adam: AdamConfig,
    pub field: FieldConfig,
    /// Sphere initialization of the SDF network; 0 iterations skips it.
    pub pretrain: PretrainConfig,
    pub discriminator: DiscriminatorConfig,
    pub augment: AugmentParams,
    pub render: RenderConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            resolution: 32,
            batch_size: 8,
            iterations: 10_000,
            seed: 0,
            lambda_reg: 10.0,
            lambda_eikonal: 10.0,
            lambda_pose: 1.0,
            lambda_mask: 0.1,
            lr_generator: 2e-5,
            lr_discriminator: 1e-4,
            adam: AdamConfig::default(),
            field: FieldConfig::default(),
            pretrain: PretrainConfig::default(),
            discriminator: DiscriminatorConfig::default(),
            augment: AugmentParams::default(),
            render: RenderConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let lambdas = [self.lambda_reg, self.lambda_eikonal, self.lambda_pose, self.lambda_mask];
        if lambdas.iter().any(|l| !(*l >= 0.0 && l.is_finite())) {
            return Err(Error::Config(format!("loss weights must be finite and non-negative, got {lambdas:?}")));
        }
        if !(self.lr_generator > 0.0 && self.lr_discriminator > 0.0) {
            return Err(Error::Config("learning rates must be positive".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        self.discriminator.validate(self.resolution)?;
        self.augment.validate()?;
        self.render.validate()
    }

    /// SHA-256 over the configuration that determines a run, ignoring the iteration count.
    pub fn hash(&self, scene: &SceneConfig) -> String {
        let mut cfg = self.clone();
        cfg.iterations = 0;
        let text = serde_json::to_string(&(cfg, scene)).expect("configs serialize");
        let digest = Sha256::digest(text.as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }
}

/// The four terms of the objective plus the gradient penalty, each already
/// multiplied by its weight.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossReport {
    /// Generator-side image adversarial loss `E[f(-D(fake))]`.
    pub adversarial: f64,
    /// `λ_mask ·` generator-side mask adversarial loss.
    pub mask: f64,
    /// `λ_pose ·` rotation-regression loss of the image discriminator on fake crops.
    pub pose: f64,
    /// `λ_eikonal ·` mean `(‖∇f‖ - 1)²` over ray and uniform samples.
    pub eikonal: f64,
    /// `λ_reg ·` R1 of the image discriminator plus `λ_mask · λ_reg ·` R1 of the mask discriminator.
    pub r1: f64,
}

impl LossReport {
    pub fn terms(&self) -> [(&'static str, f64); 5] {
        [
            ("adversarial", self.adversarial),
            ("mask", self.mask),
            ("pose", self.pose),
            ("eikonal", self.eikonal),
            ("r1", self.r1),
        ]
    }

    fn describe(terms: &[(&str, f64)]) -> String {
        terms.iter().map(|(k, v)| format!("{k}={v}")).collect::<Vec<_>>().join(", ")
    }
}

/// Gradients applied in the most recent step, in parameter order.
#[derive(Clone, Debug, PartialEq)]
pub struct StepGrads {
    pub generator: Vec<Tensor>,
    pub image_d: Vec<Tensor>,
    pub mask_d: Vec<Tensor>,
}

/// Generator, both discriminators, their optimizers and the run's random stream.
#[derive(Clone, Debug)]
pub struct Trainer {
    pub config: TrainConfig,
    pub scene: SceneConfig,
    pub generator: Generator,
    pub image_d: Discriminator,
    pub mask_d: Discriminator,
    pub opt_g: AdamState,
    pub opt_d: AdamState,
    pub opt_m: AdamState,
    pub rng: ChaCha8Rng,
    pub step: u64,
    pub last_grads: Option<StepGrads>,
}

fn stack(rasters: &[Raster]) -> Tensor {
    let (c, h, w) = rasters[0].dims();
    let mut data = Vec::with_capacity(rasters.len() * c * h * w);
    for r in rasters {
        data.extend_from_slice(r.data());
    }
    Tensor::new(vec![rasters.len(), c, h, w], data).expect("rasters share one shape")
}

fn unstack(t: &Tensor, b: usize) -> Raster {
    let s = t.shape();
    let n = s[1] * s[2] * s[3];
    Raster::new(s[1], s[2], s[3], t.data()[b * n..(b + 1) * n].to_vec()).expect("slice matches dims")
}

fn value(tape: &Tape, v: Var) -> f64 {
    tape.value(v).data()[0]
}

fn check_finite(step: u64, terms: &[(&str, f64)]) -> Result<()> {
    if terms.iter().all(|(_, v)| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite { step, terms: LossReport::describe(terms) })
    }
}

struct FakeSample {
    z: LatentCode,
    pose: PoseSample,
    plan: RenderPlan,
    color: [f64; 3],
    transform: AugmentTransform,
}

impl Trainer {
    /// Fresh models seeded from `config.seed`, with the SDF sphere-initialized.
    pub fn new(config: TrainConfig, scene: SceneConfig) -> Result<Self> {
        config.validate()?;
        scene.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut generator = Generator::new(&mut rng, &config.field)?;
        if config.pretrain.iterations > 0 {
            sphere_init_pretrain(&mut generator.sdf, &config.pretrain, &mut rng)?;
        }
        let r = config.resolution;
        let image_d = Discriminator::new(&mut rng, &config.discriminator, 3, r, true)?;
        let mask_d = Discriminator::new(&mut rng, &config.discriminator, 1, r, false)?;
        let opt_g = AdamState::new(generator.params(), config.adam);
        let opt_d = AdamState::new(image_d.params(), config.adam);
        let opt_m = AdamState::new(mask_d.params(), config.adam);
        Ok(Self { config, scene, generator, image_d, mask_d, opt_g, opt_d, opt_m, rng, step: 0, last_grads: None })
    }

    pub fn config_hash(&self) -> String {
        self.config.hash(&self.scene)
    }

    fn sample_fakes(&mut self) -> Result<Vec<FakeSample>> {
        let cfg = &self.config;
        let mut out = Vec::with_capacity(cfg.batch_size);
        for _ in 0..cfg.batch_size {
            let z = sample_latent(&mut self.rng, self.generator.latent_dim());
            let pose = self.scene.prior.sample(&self.scene.camera, &mut self.rng)?;
            let color = [self.rng.gen(), self.rng.gen(), self.rng.gen()];
            let transform = cfg.augment.sample(&mut self.rng);
            let view = Viewport::for_pose(&pose, &self.scene.camera, cfg.resolution)?;
            let rays = build_rays(&pose, &self.scene.camera, &view, cfg.render.bounding_radius);
            let plan = plan_samples(&self.generator, &z, &pose, view, rays, &cfg.render, Some(&mut self.rng))?;
            out.push(FakeSample { z, pose, plan, color, transform });
        }
        Ok(out)
    }

    /// One alternating iteration: a discriminator update on real and fake
    /// crops, then a generator update through the renderer.
    pub fn train_step(&mut self, crops: &CropSet) -> Result<LossReport> {
        let cfg = self.config.clone();
        if crops.is_empty() || crops.resolution != cfg.resolution {
            return Err(Error::invalid(format!(
                "training needs a nonempty crop set at resolution {}, got {} crops at {}",
                cfg.resolution,
                crops.len(),
                crops.resolution
            )));
        }
        let step = self.step;
        let fakes = self.sample_fakes()?;
        let mut fake_images = Vec::with_capacity(fakes.len());
        let mut fake_masks = Vec::with_capacity(fakes.len());
        for f in &fakes {
            let crop = execute_plan(&self.generator, &f.z, &f.plan, &self.scene.light, &cfg.render)?;
            let composed = composite_background(&crop.rgb, &crop.mask, f.color)?;
            fake_images.push(f.transform.apply(&composed, &f.color)?);
            fake_masks.push(f.transform.apply(&crop.mask, &[0.0])?);
        }
        let mut real_images = Vec::with_capacity(fakes.len());
        let mut real_masks = Vec::with_capacity(fakes.len());
        for f in &fakes {
            let k = self.rng.gen_range(0..crops.len());
            let t = cfg.augment.sample(&mut self.rng);
            let composed = composite_background(&crops.images[k], &crops.masks[k], f.color)?;
            real_images.push(t.apply(&composed, &f.color)?);
            real_masks.push(t.apply(&crops.masks[k], &[0.0])?);
        }
        let rotations: Vec<_> = fakes.iter().map(|f| f.pose.rotation).collect();

        // Discriminator update.
        let (d_grads, m_grads, pose_term, r1_term) = {
            let mut tape = Tape::new();
            let d_img = self.image_d.bind(&mut tape, true);
            let d_mask = self.mask_d.bind(&mut tape, true);
            let real = tape.constant(stack(&real_images));
            let fake = tape.constant(stack(&fake_images));
            let real_m = tape.constant(stack(&real_masks));
            let fake_m = tape.constant(stack(&fake_masks));

            let or = d_img.forward(&mut tape, real, true)?;
            let of = d_img.forward(&mut tape, fake, false)?;
            let adv = discriminator_loss(&mut tape, or.logit, of.logit)?;
            let r1 = r1_penalty(&mut tape, or.input_grad.expect("requested"))?;
            let pose = pose_loss_tape(&mut tape, of.pose.expect("image critic has a pose head"), &rotations)?;

            let mr = d_mask.forward(&mut tape, real_m, true)?;
            let mf = d_mask.forward(&mut tape, fake_m, false)?;
            let m_adv = discriminator_loss(&mut tape, mr.logit, mf.logit)?;
            let m_r1 = r1_penalty(&mut tape, mr.input_grad.expect("requested"))?;

            let r1_w = tape.scale(r1, cfg.lambda_reg)?;
            let pose_w = tape.scale(pose, cfg.lambda_pose)?;
            let m_r1_w = tape.scale(m_r1, cfg.lambda_reg)?;
            let m_total = tape.add(m_adv, m_r1_w)?;
            let m_w = tape.scale(m_total, cfg.lambda_mask)?;
            let mut total = tape.add(adv, r1_w)?;
            total = tape.add(total, pose_w)?;
            total = tape.add(total, m_w)?;

            let pose_term = value(&tape, pose_w);
            let r1_term = value(&tape, r1_w) + cfg.lambda_mask * value(&tape, m_r1_w);
            let d_terms = [
                ("discriminator", value(&tape, adv)),
                ("mask_discriminator", value(&tape, m_adv)),
                ("pose", pose_term),
                ("r1", r1_term),
                ("total", value(&tape, total)),
            ];
            check_finite(step, &d_terms)?;
            let g = tape.backward(total)?;
            let d_grads: Vec<Tensor> = d_img.param_vars().iter().map(|v| g.wrt(*v)).collect();
            let m_grads: Vec<Tensor> = d_mask.param_vars().iter().map(|v| g.wrt(*v)).collect();
            (d_grads, m_grads, pose_term, r1_term)
        };
        {
            let mut p: Vec<&mut Tensor> = self.image_d.params_mut().iter_mut().collect();
            self.opt_d.update(&mut p, &d_grads, cfg.lr_discriminator);
            let mut p: Vec<&mut Tensor> = self.mask_d.params_mut().iter_mut().collect();
            self.opt_m.update(&mut p, &m_grads, cfg.lr_discriminator);
        }

        // Generator update against the updated critics.
        let (adv_value, mask_value, image_seed, mask_seed) = {
            let mut tape = Tape::new();
            let d_img = self.image_d.bind(&mut tape, false);
            let d_mask = self.mask_d.bind(&mut tape, false);
            let fake = tape.leaf(stack(&fake_images));
            let fake_m = tape.leaf(stack(&fake_masks));
            let oi = d_img.forward(&mut tape, fake, false)?;
            let om = d_mask.forward(&mut tape, fake_m, false)?;
            let adv = generator_loss(&mut tape, oi.logit)?;
            let m_adv = generator_loss(&mut tape, om.logit)?;
            let m_w = tape.scale(m_adv, cfg.lambda_mask)?;
            let total = tape.add(adv, m_w)?;
            let g = tape.backward(total)?;
            (value(&tape, adv), value(&tape, m_w), g.wrt(fake), g.wrt(fake_m))
        };

        let ray_points: usize = fakes.iter().map(|f| f.plan.num_points()).sum();
        let uniform_points = ray_points;
        let eik_weight = cfg.lambda_eikonal / (ray_points + uniform_points).max(1) as f64;
        let chunk = cfg.render.chunk_rays * cfg.render.samples_per_ray();
        let mut g_grads: Vec<Tensor> = self.generator.params().iter().map(|p| Tensor::zeros(p.shape().to_vec())).collect();
        let mut eik_sum = 0.0;
        for (b, f) in fakes.iter().enumerate() {
            let (g_composed, _) = f.transform.adjoint(&unstack(&image_seed, b));
            let (g_mask_aug, _) = f.transform.adjoint(&unstack(&mask_seed, b));
            let mut g_mask = g_mask_aug;
            // composite = rgb + (1 - mask) * color
            for (c, col) in f.color.iter().enumerate() {
                for (m, gc) in g_mask.data_mut().iter_mut().zip(g_composed.plane(c)) {
                    *m -= gc * col;
                }
            }
            let seeds = CropSeeds { rgb: Some(g_composed), mask: Some(g_mask), eikonal: eik_weight };
            let grads = backprop_plan(&self.generator, &f.z, &f.plan, &self.scene.light, &cfg.render, &seeds, BindMode::PARAMS)?;
            eik_sum += grads.eikonal_sum;
            crate::render::accumulate(&mut g_grads, grads.params);

            let share = uniform_points / fakes.len() + usize::from(b < uniform_points % fakes.len());
            let pts = random_points(&mut self.rng, share, EIKONAL_EXTENT);
            let (sum, grads) = eikonal_backprop(&self.generator, &f.z, &pts, eik_weight, chunk)?;
            eik_sum += sum;
            crate::render::accumulate(&mut g_grads, grads);
        }
        let report = LossReport {
            adversarial: adv_value,
            mask: mask_value,
            pose: pose_term,
            eikonal: eik_weight * eik_sum,
            r1: r1_term,
        };
        check_finite(step, &report.terms())?;
        {
            let mut p = self.generator.params_mut();
            self.opt_g.update(&mut p, &g_grads, cfg.lr_generator);
        }
        self.generator.project();
        self.last_grads = Some(StepGrads { generator: g_grads, image_d: d_grads, mask_d: m_grads });
        self.step += 1;
        debug!("step {step}: {}", LossReport::describe(&report.terms()));
        Ok(report)
    }

    /// Runs `steps` iterations, appending each report to `log` when given.
    pub fn train(&mut self, crops: &CropSet, steps: u64, mut log: Option<&mut LossLog>) -> Result<Vec<LossReport>> {
        let mut out = Vec::with_capacity(steps as usize);
        for _ in 0..steps {
            let step = self.step;
            let report = self.train_step(crops)?;
            if let Some(log) = log.as_deref_mut() {
                log.append(step, &report)?;
            }
            out.push(report);
        }
        Ok(out)
    }
}

/// Line-delimited JSON loss log, one object per step.
pub struct LossLog {
    file: std::fs::File,
    path: std::path::PathBuf,
}

#[derive(Serialize)]
struct LogLine<'a> {
    step: u64,
    #[serde(flatten)]
    report: &'a LossReport,
}

impl LossLog {
    pub fn open(path: &Path) -> Result<Self> {
        let file = OpenOptions::new().create(true).append(true).open(path).map_err(|e| Error::io(path, e))?;
        Ok(Self { file, path: path.to_path_buf() })
    }

    pub fn append(&mut self, step: u64, report: &LossReport) -> Result<()> {
        let line = serde_json::to_string(&LogLine { step, report }).expect("report serializes");
        writeln!(self.file, "{line}").map_err(|e| Error::io(&self.path, e))
    }
}
