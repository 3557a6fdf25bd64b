//! Acceptance criteria, one test each. Every test prints a single
//! `PASS`/`FAIL` line and then asserts it; tolerances are the constants below.
//!
//! ```text
//! cargo test --release -p objint-core --test acceptance -- --nocapture
//! cargo test --release -p objint-core --test acceptance -- --nocapture --include-ignored
//! ```
//!
//! Criteria 4 and 5 train and invert at full scale and are ignored by default.

use std::sync::Mutex;
use std::time::{Duration, Instant};

use nalgebra::{Matrix3, Rotation3, Vector3};
use objint_autodiff::{gradient_check, Tape, Tensor, Var};
use objint_core::adversarial::discriminator::{Discriminator, DiscriminatorConfig};
use objint_core::adversarial::{
    discriminator_loss, generator_loss, pose_loss_tape, r1_penalty, AugmentParams, AugmentTransform,
};
use objint_core::fields::analytic::{AnalyticObject, BandAlbedo, Shape};
use objint_core::fields::{sample_latent, FieldConfig, LatentCode, PretrainConfig};
use objint_core::inference::eval::{evaluate_synthetic, EvalConfig, MetricRecord};
use objint_core::inference::metrics::{normal_angle_error, psnr, si_albedo_metrics, si_depth_mse, ssim};
use objint_core::inference::{invert, relight, render_fixed, InversionConfig, InversionTarget};
use objint_core::model::{AnalyticModel, BindMode, Generator};
use objint_core::raster::Raster;
use objint_core::render::pose::geodesic_deg;
use objint_core::render::{
    backprop_plan, eikonal_backprop, eikonal_sum_plan, execute_plan, neus_weights, render_crop, Camera, CropSeeds,
    PoseSample, RenderConfig, RenderPlan, Viewport,
};
use objint_core::scene::{
    composite_background, extract_crops, synth_scene_generate, CropSet, InstanceMask, SceneConfig, SynthConfig,
    SynthDataset,
};
use objint_core::shading::{LightConfig, PhongParams};
use objint_core::training::{Checkpoint, TrainConfig, Trainer};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

// Criterion 1
const PRIMITIVE_REL_ERR: f64 = 1e-4;
const LOSS_REL_ERR: f64 = 1e-4;
const RENDER_REL_ERR: f64 = 1e-3;
const AUTODIFF_BUDGET: Duration = Duration::from_secs(60);
// Criterion 2
const NEUS_BUDGET: Duration = Duration::from_secs(5);
// Criterion 3
const SILHOUETTE_IOU: f64 = 0.98;
const SHADING_REL_ERR: f64 = 0.10;
// Criterion 4
const CLOSED_LOOP_STEPS: u64 = 10_000;
const CLOSED_LOOP_SEEDS: [u64; 3] = [0, 1, 2];
const DEPTH_SI_MSE_MAX: f64 = 0.05;
const NORMAL_DEG_MAX: f64 = 25.0;
const ALBEDO_PSNR_MIN: f64 = 18.0;
const DEPTH_IMPROVEMENT: f64 = 2.0;
const NORMAL_IMPROVEMENT_DEG: f64 = 15.0;
const ALBEDO_IMPROVEMENT_DB: f64 = 4.0;
// Criterion 5
const SELF_INVERSION_TARGETS: usize = 10;
const SELF_INVERSION_REQUIRED: usize = 8;
const SELF_PSNR_MIN: f64 = 30.0;
const SELF_POSE_DEG_MAX: f64 = 15.0;
// Criterion 6
const RELIGHT_SAMPLES: usize = 10;
const RELIGHT_REQUIRED: usize = 9;
// Criterion 7
const INVARIANT_BUDGET: Duration = Duration::from_secs(600);
/// Two-sample chi-square critical value, 19 degrees of freedom, p = 0.001.
const CHI2_CRITICAL: f64 = 43.82;

/// Criteria run one at a time so wall-clock budgets are not shared.
static SERIAL: Mutex<()> = Mutex::new(());

fn serial() -> std::sync::MutexGuard<'static, ()> {
    SERIAL.lock().unwrap_or_else(|e| e.into_inner())
}

fn verdict(id: u8, name: &str, checks: &[(String, bool)]) {
    let pass = checks.iter().all(|(_, ok)| *ok);
    let detail: Vec<String> =
        checks.iter().map(|(d, ok)| if *ok { d.clone() } else { format!("{d} [FAILED]") }).collect();
    println!("{} criterion {id} ({name}): {}", if pass { "PASS" } else { "FAIL" }, detail.join("; "));
    assert!(pass, "criterion {id} failed");
}

fn rel_err(analytic: &[f64], numeric: &[f64]) -> f64 {
    let diff: f64 = analytic.iter().zip(numeric).map(|(a, n)| (a - n) * (a - n)).sum();
    let norm: f64 = numeric.iter().map(|n| n * n).sum();
    if norm == 0.0 {
        diff.sqrt()
    } else {
        (diff / norm).sqrt()
    }
}

fn identity_at(t: [f64; 3]) -> PoseSample {
    PoseSample::from_parts([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]], t).unwrap()
}

fn no_rng() -> Option<&'static mut ChaCha8Rng> {
    None
}

// ---------------------------------------------------------------------------
// Criterion 1

fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(lo..hi)).collect()).unwrap()
}

type Probe = Box<dyn Fn(&mut Tape, Var) -> objint_autodiff::Result<Var>>;

/// Every primitive, each reduced to a scalar through a fixed random weighting.
fn primitive_probes(rng: &mut ChaCha8Rng) -> Vec<(&'static str, Tensor, Probe)> {
    let w = random_tensor(rng, &[2, 3], -1.0, 1.0);
    let c = random_tensor(rng, &[2, 3], 0.5, 1.5);
    let m = random_tensor(rng, &[3, 4], -1.0, 1.0);
    let kern = random_tensor(rng, &[2, 2, 3, 3], -1.0, 1.0);
    let kern_t = random_tensor(rng, &[2, 2, 3, 3], -1.0, 1.0);
    let x = random_tensor(rng, &[2, 3], -1.0, 1.0);
    let pos = random_tensor(rng, &[2, 3], 0.5, 2.0);
    let img = random_tensor(rng, &[1, 2, 5, 5], -1.0, 1.0);

    fn weighted(t: &mut Tape, y: Var, w: &Tensor) -> objint_autodiff::Result<Var> {
        let p = t.mul_const(y, w.clone())?;
        t.sum(p)
    }
    let wc = w.clone();
    let reduce = move |t: &mut Tape, y: Var| weighted(t, y, &wc);

    macro_rules! unary {
        ($name:literal, $input:expr, |$t:ident, $v:ident| $body:expr) => {{
            let r = reduce.clone();
            let probe: Probe = Box::new(move |$t: &mut Tape, $v: Var| {
                let y = $body?;
                r($t, y)
            });
            ($name, $input.clone(), probe)
        }};
    }
    let cc = c.clone();
    let mm = m.clone();
    let kk = kern.clone();
    let kt = kern_t.clone();
    let cc2 = c.clone();
    let cc3 = c.clone();
    let cc4 = c.clone();
    let cc5 = c.clone();
    let cc6 = c.clone();
    vec![
        unary!("add", x, |t, v| {
            let k = t.constant(cc.clone());
            t.add(v, k)
        }),
        unary!("sub", x, |t, v| {
            let k = t.constant(cc2.clone());
            t.sub(k, v)
        }),
        unary!("mul", x, |t, v| {
            let k = t.constant(cc3.clone());
            t.mul(v, k)
        }),
        unary!("div", pos, |t, v| {
            let k = t.constant(cc4.clone());
            t.div(k, v)
        }),
        unary!("pow", pos, |t, v| {
            let k = t.constant(cc5.clone());
            t.pow(v, k)
        }),
        unary!("maximum", x, |t, v| {
            let k = t.constant(Tensor::new(vec![2, 3], vec![0.05, -0.3, 0.2, -0.05, 0.4, 0.0]).unwrap());
            t.maximum(v, k)
        }),
        unary!("neg", x, |t, v| t.neg(v)),
        unary!("sin", x, |t, v| t.sin(v)),
        unary!("cos", x, |t, v| t.cos(v)),
        unary!("exp", x, |t, v| t.exp(v)),
        unary!("log", pos, |t, v| t.log(v)),
        unary!("sigmoid", x, |t, v| t.sigmoid(v)),
        unary!("softplus", x, |t, v| t.softplus(v)),
        unary!("sqrt", pos, |t, v| t.sqrt(v)),
        unary!("square", x, |t, v| t.square(v)),
        unary!("scale", x, |t, v| t.scale(v, -2.5)),
        unary!("add_scalar", x, |t, v| t.add_scalar(v, 0.7)),
        unary!("max_const", x, |t, v| t.max_const(v, 0.01)),
        unary!("leaky_relu", x, |t, v| t.leaky_relu(v, 0.2)),
        unary!("mul_const", x, |t, v| t.mul_const(v, cc6.clone())),
        unary!("sum_axis", x, |t, v| {
            let s = t.sum_axis(v, 0)?;
            t.broadcast_to(s, &[2, 3])
        }),
        unary!("mean", x, |t, v| {
            let s = t.mean(v)?;
            let s = t.reshape(s, &[1, 1])?;
            t.broadcast_to(s, &[2, 3])
        }),
        unary!("norm_last", x, |t, v| {
            let n = t.norm_last(v)?;
            let n = t.reshape(n, &[2, 1])?;
            t.broadcast_to(n, &[2, 3])
        }),
        unary!("transpose", x, |t, v| {
            let y = t.transpose(v)?;
            let y = t.square(y)?;
            t.transpose(y)
        }),
        unary!("concat_slice", x, |t, v| {
            let sq = t.square(v)?;
            let both = t.concat(&[v, sq], 1)?;
            t.slice(both, 1, 2, 5)
        }),
        unary!("matmul", x, |t, v| {
            let k = t.constant(mm.clone());
            let y = t.matmul(v, k)?;
            t.slice(y, 1, 0, 3)
        }),
        {
            let probe: Probe = Box::new(move |t: &mut Tape, v: Var| {
                let k = t.constant(kk.clone());
                let y = t.conv2d(v, k, 2, 1)?;
                let y = t.square(y)?;
                t.sum(y)
            });
            ("conv2d", img.clone(), probe)
        },
        {
            let probe: Probe = Box::new(move |t: &mut Tape, v: Var| {
                let k = t.constant(kt.clone());
                let y = t.conv2d_transpose(v, k, 2, 1, 10, 10)?;
                let y = t.sin(y)?;
                t.sum(y)
            });
            ("conv2d_transpose", img.clone(), probe)
        },
    ]
}

fn tiny_generator(seed: u64) -> Generator {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cfg = FieldConfig { latent_dim: 3, width: 8, sdf_layers: 2, albedo_layers: 2, ..FieldConfig::default() };
    let mut g = Generator::new(&mut rng, &cfg).unwrap();
    let bias = g.sdf.net.params_mut().last_mut().unwrap();
    bias.data_mut()[0] -= 1.2;
    g.phong = PhongParams { k_d: 0.9, k_a: 0.4, k_s: 0.3, alpha: 3.0 }.to_tensor();
    g.log_scale.data_mut()[0] = 8f64.ln();
    g
}

/// Central differences over every `stride`-th entry of every parameter tensor and the latent.
fn fd_over_generator(
    g: &Generator,
    z: &LatentCode,
    stride: usize,
    objective: &dyn Fn(&Generator, &LatentCode) -> f64,
) -> (Vec<(usize, usize, f64)>, Vec<(usize, f64)>) {
    let eps = 1e-6;
    let mut params = Vec::new();
    let mut probe = g.clone();
    let n_tensors = g.params().len();
    for p in 0..n_tensors {
        let len = g.params()[p].data().len();
        let offset = p % stride;
        for i in (offset.min(len - 1)..len).step_by(stride) {
            let base = g.params()[p].data()[i];
            probe.params_mut()[p].data_mut()[i] = base + eps;
            let up = objective(&probe, z);
            probe.params_mut()[p].data_mut()[i] = base - eps;
            let down = objective(&probe, z);
            probe.params_mut()[p].data_mut()[i] = base;
            params.push((p, i, (up - down) / (2.0 * eps)));
        }
    }
    let mut latent = Vec::new();
    for i in 0..z.dim() {
        let mut v = z.values().to_vec();
        v[i] += eps;
        let up = objective(g, &LatentCode::new(v.clone()));
        v[i] -= 2.0 * eps;
        let down = objective(g, &LatentCode::new(v));
        latent.push((i, (up - down) / (2.0 * eps)));
    }
    (params, latent)
}

fn render_objective<'a>(
    plan: &'a RenderPlan,
    light: &'a LightConfig,
    cfg: &'a RenderConfig,
    seeds: &CropSeeds,
) -> impl Fn(&Generator, &LatentCode) -> f64 + 'a {
    let seeds = seeds.clone();
    move |g, z| {
        let crop = execute_plan(g, z, plan, light, cfg).unwrap();
        let dot = |a: &Raster, b: &Raster| a.data().iter().zip(b.data()).map(|(x, y)| x * y).sum::<f64>();
        let mut v = dot(&crop.rgb, seeds.rgb.as_ref().unwrap()) + dot(&crop.mask, seeds.mask.as_ref().unwrap());
        v += seeds.eikonal * eikonal_sum_plan(g, z, plan, 64).unwrap();
        v
    }
}

/// Relative error of the render pipeline's parameter and latent gradients,
/// per parameter group.
fn render_pipeline_errors() -> Vec<(String, f64)> {
    let g = tiny_generator(4);
    let z = LatentCode::new(vec![0.3, -0.2, 0.5]);
    let t = Vector3::new(0.0, 0.0, 12.0);
    let prior = objint_core::render::PosePrior::default();
    let pose = PoseSample { rotation: prior.rotation_for(30.0, 40.0, 10.0, &t), translation: t };
    let light = LightConfig::new([0.4, -0.5, -0.8]).unwrap();
    let cfg = RenderConfig { coarse_samples: 12, importance_samples: 4, ..RenderConfig::default() };
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let (crop, plan) = render_crop(&g, &z, &pose, &light, &Camera::default(), 5, &cfg, Some(&mut rng)).unwrap();
    assert!(crop.mask.data().iter().sum::<f64>() > 1.0, "probe crop is empty: {:?}", crop.mask.data());
    let seeds = CropSeeds {
        rgb: Some(Raster::from_fn(3, 5, 5, |c, y, x| ((c + 2 * y + 3 * x) % 7) as f64 / 7.0 - 0.4)),
        mask: Some(Raster::from_fn(1, 5, 5, |_, y, x| ((y * 5 + x) % 3) as f64 / 3.0 - 0.3)),
        eikonal: 0.05,
    };
    let mode = BindMode { params: true, latent: true };
    let grads = backprop_plan(&g, &z, &plan, &light, &cfg, &seeds, mode).unwrap();
    let objective = render_objective(&plan, &light, &cfg, &seeds);
    let (fd_params, fd_latent) = fd_over_generator(&g, &z, 3, &objective);

    let groups = g.groups();
    let mut out = Vec::new();
    let mut group = |name: &str, pick: &dyn Fn(usize) -> bool| {
        let (a, n): (Vec<f64>, Vec<f64>) =
            fd_params.iter().filter(|(p, _, _)| pick(*p)).map(|&(p, i, fd)| (grads.params[p].data()[i], fd)).unzip();
        let nonzero = n.iter().any(|v| v.abs() > 1e-9);
        out.push((name.to_string(), if nonzero { rel_err(&a, &n) } else { f64::INFINITY }));
    };
    group("sdf", &|p| groups.sdf.contains(&p));
    group("albedo", &|p| groups.albedo.contains(&p));
    group("phong", &|p| p == groups.phong);
    group("sharpness", &|p| p == groups.scale);
    let latent = grads.latent.unwrap();
    let (a, n): (Vec<f64>, Vec<f64>) = fd_latent.iter().map(|&(i, fd)| (latent.data()[i], fd)).unzip();
    out.push(("latent".into(), rel_err(&a, &n)));
    out
}

/// Eikonal term over free points, with respect to SDF parameters and latent.
fn eikonal_error() -> f64 {
    let g = tiny_generator(6);
    let z = LatentCode::new(vec![-0.1, 0.4, 0.2]);
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let pts: Vec<[f64; 3]> = (0..20).map(|_| std::array::from_fn(|_| rng.gen_range(-1.5..1.5))).collect();
    let (_, grads) = eikonal_backprop(&g, &z, &pts, 1.0, 7).unwrap();
    let objective = |g: &Generator, z: &LatentCode| eikonal_backprop(g, z, &pts, 1.0, 7).unwrap().0;
    let (fd, _) = fd_over_generator(&g, &z, 2, &objective);
    let sdf = g.groups().sdf;
    let (a, n): (Vec<f64>, Vec<f64>) =
        fd.iter().filter(|(p, _, _)| sdf.contains(p)).map(|&(p, i, v)| (grads[p].data()[i], v)).unzip();
    rel_err(&a, &n)
}

fn tiny_critic(seed: u64, channels: usize, pose_head: bool) -> Discriminator {
    let cfg = DiscriminatorConfig { widths: vec![2, 3], leaky_slope: 0.2 };
    Discriminator::new(&mut ChaCha8Rng::seed_from_u64(seed), &cfg, channels, 8, pose_head).unwrap()
}

fn random_rotation(rng: &mut ChaCha8Rng) -> Matrix3<f64> {
    let axis = Vector3::new(rng.gen::<f64>() - 0.5, rng.gen::<f64>() - 0.5, rng.gen::<f64>() - 0.5);
    Rotation3::from_scaled_axis(axis * 4.0).into_inner()
}

struct CriticSide {
    image_d: Discriminator,
    mask_d: Discriminator,
    real: Tensor,
    fake: Tensor,
    real_m: Tensor,
    fake_m: Tensor,
    rotations: Vec<Matrix3<f64>>,
}

const LAMBDA_REG: f64 = 10.0;
const LAMBDA_POSE: f64 = 1.0;
const LAMBDA_MASK: f64 = 0.1;
const LAMBDA_EIK: f64 = 10.0;

impl CriticSide {
    fn new() -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        Self {
            image_d: tiny_critic(1, 3, true),
            mask_d: tiny_critic(2, 1, false),
            real: random_tensor(&mut rng, &[2, 3, 8, 8], 0.0, 1.0),
            fake: random_tensor(&mut rng, &[2, 3, 8, 8], 0.0, 1.0),
            real_m: random_tensor(&mut rng, &[2, 1, 8, 8], 0.0, 1.0),
            fake_m: random_tensor(&mut rng, &[2, 1, 8, 8], 0.0, 1.0),
            rotations: (0..2).map(|_| random_rotation(&mut rng)).collect(),
        }
    }

    /// Critic-side objective: adversarial + R1 + rotation regression + weighted mask critic terms.
    /// Returns the value and, when `trainable`, the gradients of both critics.
    fn objective(&self, trainable: bool) -> (f64, Vec<Tensor>, Vec<Tensor>) {
        let mut tape = Tape::new();
        let d = self.image_d.bind(&mut tape, trainable);
        let dm = self.mask_d.bind(&mut tape, trainable);
        let real = tape.constant(self.real.clone());
        let fake = tape.constant(self.fake.clone());
        let real_m = tape.constant(self.real_m.clone());
        let fake_m = tape.constant(self.fake_m.clone());
        let or = d.forward(&mut tape, real, true).unwrap();
        let of = d.forward(&mut tape, fake, false).unwrap();
        let adv = discriminator_loss(&mut tape, or.logit, of.logit).unwrap();
        let r1 = r1_penalty(&mut tape, or.input_grad.unwrap()).unwrap();
        let pose = pose_loss_tape(&mut tape, of.pose.unwrap(), &self.rotations).unwrap();
        let mr = dm.forward(&mut tape, real_m, true).unwrap();
        let mf = dm.forward(&mut tape, fake_m, false).unwrap();
        let m_adv = discriminator_loss(&mut tape, mr.logit, mf.logit).unwrap();
        let m_r1 = r1_penalty(&mut tape, mr.input_grad.unwrap()).unwrap();
        let r1 = tape.scale(r1, LAMBDA_REG).unwrap();
        let pose = tape.scale(pose, LAMBDA_POSE).unwrap();
        let m_r1 = tape.scale(m_r1, LAMBDA_REG).unwrap();
        let m = tape.add(m_adv, m_r1).unwrap();
        let m = tape.scale(m, LAMBDA_MASK).unwrap();
        let mut total = tape.add(adv, r1).unwrap();
        total = tape.add(total, pose).unwrap();
        total = tape.add(total, m).unwrap();
        let value = tape.value(total).item().unwrap();
        if !trainable {
            return (value, Vec::new(), Vec::new());
        }
        let g = tape.backward(total).unwrap();
        (value, d.param_vars().iter().map(|v| g.wrt(*v)).collect(), dm.param_vars().iter().map(|v| g.wrt(*v)).collect())
    }
}

fn critic_param(s: &mut CriticSide, which: usize, p: usize, i: usize) -> &mut f64 {
    let d = if which == 0 { &mut s.image_d } else { &mut s.mask_d };
    &mut d.params_mut()[p].data_mut()[i]
}

/// Critic-side objective against central differences over both critics' parameters.
fn critic_objective_error() -> f64 {
    let mut side = CriticSide::new();
    let (_, gd, gm) = side.objective(true);
    let eps = 1e-6;
    let (mut a, mut n) = (Vec::new(), Vec::new());
    for which in 0..2 {
        let count = if which == 0 { side.image_d.params().len() } else { side.mask_d.params().len() };
        for p in 0..count {
            let len = if which == 0 { side.image_d.params()[p].data().len() } else { side.mask_d.params()[p].data().len() };
            for i in (0..len).step_by(3) {
                let base = *critic_param(&mut side, which, p, i);
                *critic_param(&mut side, which, p, i) = base + eps;
                let up = side.objective(false).0;
                *critic_param(&mut side, which, p, i) = base - eps;
                let down = side.objective(false).0;
                *critic_param(&mut side, which, p, i) = base;
                n.push((up - down) / (2.0 * eps));
                a.push(if which == 0 { gd[p].data()[i] } else { gm[p].data()[i] });
            }
        }
    }
    rel_err(&a, &n)
}

/// Generator-side objective: image and mask adversarial terms through
/// background compositing, augmentation and the renderer, plus the eikonal
/// term over the samples.
fn generator_objective_error() -> f64 {
    let g = tiny_generator(9);
    let d = tiny_critic(3, 3, true);
    let dm = tiny_critic(4, 1, false);
    let camera = Camera::default();
    let light = LightConfig::new([-0.3, -0.4, -0.9]).unwrap();
    let cfg = RenderConfig { coarse_samples: 8, importance_samples: 2, ..RenderConfig::default() };
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let prior = objint_core::render::PosePrior::default();
    struct Fake {
        z: LatentCode,
        plan: RenderPlan,
        color: [f64; 3],
        t: AugmentTransform,
    }
    let fakes: Vec<Fake> = (0..2)
        .map(|_| {
            let z = sample_latent(&mut rng, 3);
            let pose = prior.sample(&camera, &mut rng).unwrap();
            let (_, plan) = render_crop(&g, &z, &pose, &light, &camera, 8, &cfg, Some(&mut rng)).unwrap();
            let t = AugmentParams::default().sample(&mut rng);
            Fake { z, plan, color: [rng.gen(), rng.gen(), rng.gen()], t }
        })
        .collect();
    let n_points: usize = fakes.iter().map(|f| f.plan.num_points()).sum();
    let eik_w = LAMBDA_EIK / n_points as f64;

    let stack = |rs: &[Raster]| {
        let (c, h, w) = rs[0].dims();
        Tensor::new(vec![rs.len(), c, h, w], rs.iter().flat_map(|r| r.data().to_vec()).collect()).unwrap()
    };
    let forward = |g: &Generator| -> (Vec<Raster>, Vec<Raster>, f64) {
        let (mut imgs, mut masks, mut eik) = (Vec::new(), Vec::new(), 0.0);
        for f in &fakes {
            let crop = execute_plan(g, &f.z, &f.plan, &light, &cfg).unwrap();
            let comp = composite_background(&crop.rgb, &crop.mask, f.color).unwrap();
            imgs.push(f.t.apply(&comp, &f.color).unwrap());
            masks.push(f.t.apply(&crop.mask, &[0.0]).unwrap());
            eik += eikonal_sum_plan(g, &f.z, &f.plan, 64).unwrap();
        }
        (imgs, masks, eik)
    };
    let value = |g: &Generator| {
        let (imgs, masks, eik) = forward(g);
        let (li, _) = d.evaluate(&stack(&imgs)).unwrap();
        let (lm, _) = dm.evaluate(&stack(&masks)).unwrap();
        let gl = |l: &[f64]| l.iter().map(|v| objint_autodiff::softplus(-v)).sum::<f64>() / l.len() as f64;
        gl(&li) + LAMBDA_MASK * gl(&lm) + eik_w * eik
    };

    // Analytic route: critic gradients at the fake batch, pulled back through
    // augmentation and compositing, then through the renderer.
    let (imgs, masks, _) = forward(&g);
    let mut tape = Tape::new();
    let bd = d.bind(&mut tape, false);
    let bm = dm.bind(&mut tape, false);
    let fi = tape.leaf(stack(&imgs));
    let fm = tape.leaf(stack(&masks));
    let oi = bd.forward(&mut tape, fi, false).unwrap();
    let om = bm.forward(&mut tape, fm, false).unwrap();
    let a = generator_loss(&mut tape, oi.logit).unwrap();
    let b = generator_loss(&mut tape, om.logit).unwrap();
    let b = tape.scale(b, LAMBDA_MASK).unwrap();
    let total = tape.add(a, b).unwrap();
    let grads = tape.backward(total).unwrap();
    let (gi, gm) = (grads.wrt(fi), grads.wrt(fm));
    let plane = |t: &Tensor, b: usize, c: usize| {
        let n = t.numel() / t.shape()[0];
        Raster::new(c, 8, 8, t.data()[b * n..(b + 1) * n].to_vec()).unwrap()
    };
    let mut analytic: Vec<Tensor> = g.params().iter().map(|p| Tensor::zeros(p.shape().to_vec())).collect();
    for (k, f) in fakes.iter().enumerate() {
        let (g_comp, _) = f.t.adjoint(&plane(&gi, k, 3));
        let (mut g_mask, _) = f.t.adjoint(&plane(&gm, k, 1));
        for (c, col) in f.color.iter().enumerate() {
            for (m, v) in g_mask.data_mut().iter_mut().zip(g_comp.plane(c)) {
                *m -= v * col;
            }
        }
        let seeds = CropSeeds { rgb: Some(g_comp), mask: Some(g_mask), eikonal: eik_w };
        let mg = backprop_plan(&g, &f.z, &f.plan, &light, &cfg, &seeds, BindMode::PARAMS).unwrap();
        for (acc, p) in analytic.iter_mut().zip(&mg.params) {
            acc.data_mut().iter_mut().zip(p.data()).for_each(|(x, y)| *x += y);
        }
    }
    let objective = |g: &Generator, _: &LatentCode| value(g);
    let (fd, _) = fd_over_generator(&g, &LatentCode::zeros(0), 4, &objective);
    let (a, n): (Vec<f64>, Vec<f64>) = fd.iter().map(|&(p, i, v)| (analytic[p].data()[i], v)).unzip();
    rel_err(&a, &n)
}

fn rotation_loss_error() -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let rots: Vec<Matrix3<f64>> = (0..3).map(|_| random_rotation(&mut rng)).collect();
    let x = random_tensor(&mut rng, &[3, 6], -1.0, 1.0);
    gradient_check(|t, v| Ok(pose_loss_tape(t, v, &rots).expect("shapes match")), &x, 1e-6).unwrap()
}

/// Adversarial terms and penalty with respect to the critic input.
fn adversarial_input_error() -> f64 {
    let d = tiny_critic(7, 3, true);
    let x = random_tensor(&mut ChaCha8Rng::seed_from_u64(6), &[2, 3, 8, 8], 0.0, 1.0);
    let f = |t: &mut Tape, v: Var| -> objint_autodiff::Result<Var> {
        let b = d.bind(t, false);
        let o = b.forward(t, v, true).expect("input shape");
        let g = generator_loss(t, o.logit).expect("nonempty");
        let r = r1_penalty(t, o.input_grad.expect("requested")).expect("nonempty");
        let r = t.scale(r, LAMBDA_REG)?;
        t.add(g, r)
    };
    gradient_check(f, &x, 1e-6).unwrap()
}

#[test]
fn criterion_1_autodiff_correctness() {
    let _guard = serial();
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    let mut checks = Vec::new();
    let mut worst_prim: (f64, &str) = (0.0, "");
    for (name, x, probe) in primitive_probes(&mut rng) {
        let err = gradient_check(|t, v| probe(t, v), &x, 1e-6).unwrap();
        if err >= worst_prim.0 {
            worst_prim = (err, name);
        }
        if err >= PRIMITIVE_REL_ERR {
            checks.push((format!("primitive {name} {err:.1e}"), false));
        }
    }
    checks.push((format!("primitives worst {:.1e} ({})", worst_prim.0, worst_prim.1), worst_prim.0 < PRIMITIVE_REL_ERR));

    let eik = eikonal_error();
    checks.push((format!("eikonal {eik:.1e}"), eik < LOSS_REL_ERR));
    for (group, err) in render_pipeline_errors() {
        checks.push((format!("render/{group} {err:.1e}"), err < RENDER_REL_ERR));
    }
    let rot = rotation_loss_error();
    checks.push((format!("rotation regression {rot:.1e}"), rot < LOSS_REL_ERR));
    let adv = adversarial_input_error();
    checks.push((format!("adversarial+R1 wrt input {adv:.1e}"), adv < LOSS_REL_ERR));
    let critic = critic_objective_error();
    checks.push((format!("critic objective {critic:.1e}"), critic < LOSS_REL_ERR));
    let gen = generator_objective_error();
    checks.push((format!("generator objective through renderer {gen:.1e}"), gen < RENDER_REL_ERR));
    let elapsed = start.elapsed();
    checks.push((format!("{:.1}s", elapsed.as_secs_f64()), elapsed < AUTODIFF_BUDGET));
    verdict(1, "autodiff correctness", &checks);
}

// ---------------------------------------------------------------------------
// Criterion 2

fn argmax_depth(t0: f64, n: usize, s: f64) -> f64 {
    let depths: Vec<f64> = (0..n).map(|i| i as f64 / (n - 1) as f64).collect();
    let sdf: Vec<f64> = depths.iter().map(|t| t0 - t).collect();
    let w = neus_weights(&sdf, &depths, s).unwrap();
    let k = (0..n).fold(0, |b, i| if w[i] > w[b] { i } else { b });
    depths[k]
}

#[test]
fn criterion_2_unbiased_weights() {
    let _guard = serial();
    let start = Instant::now();
    let s = 200.0;
    let crossings: Vec<f64> = (0..40).map(|i| 0.3 + 0.4 * i as f64 / 39.0).collect();
    let mut checks = Vec::new();
    let mut errors = Vec::new();
    for n in [16, 32, 64] {
        let spacing = 1.0 / (n - 1) as f64;
        // True crossing, not the weights' own dense limit.
        let worst = crossings.iter().map(|t0| (argmax_depth(*t0, n, s) - t0).abs()).fold(0.0, f64::max);
        checks.push((format!("N={n} worst {worst:.4} < spacing {spacing:.4}"), worst < spacing));
        errors.push(worst);
    }
    for k in 1..errors.len() {
        let ratio = errors[k] / errors[k - 1];
        checks.push((format!("ratio {ratio:.2}"), ratio <= 0.5 + 0.1));
    }
    let elapsed = start.elapsed();
    checks.push((format!("{:.2}s", elapsed.as_secs_f64()), elapsed < NEUS_BUDGET));
    verdict(2, "unbiased surface localization", &checks);
}

// ---------------------------------------------------------------------------
// Criterion 3

#[test]
fn criterion_3_analytic_sphere() {
    let _guard = serial();
    let white = BandAlbedo { base: [1.0; 3], accent: [1.0; 3], frequency: 0.0 };
    let object = AnalyticObject { shape: Shape::Sphere { radius: 1.0 }, albedo: white, scale: 1.0 };
    let phong = PhongParams::default();
    let model = AnalyticModel::new(object, phong, 64.0).unwrap();
    let camera = Camera::default();
    let pose = identity_at([0.2, -0.15, 12.0]);
    let light = LightConfig::new([0.3, -0.4, -1.0]).unwrap();
    let cfg = RenderConfig::default();
    let res = 64;
    let (crop, plan) = render_crop(&model, &LatentCode::zeros(1), &pose, &light, &camera, res, &cfg, no_rng()).unwrap();

    // Oracle: exact ray-sphere intersection of each pixel-center ray.
    let hit_t = |row: usize, col: usize| -> Option<(f64, Vector3<f64>)> {
        let (u, v) = plan.view.pixel_center(row, col);
        let d = Vector3::from(camera.direction(u, v)).normalize();
        let c = pose.translation;
        let b = d.dot(&c);
        let disc = b * b - c.norm_squared() + 1.0;
        (disc > 0.0).then(|| (b - disc.sqrt(), d))
    };
    let (mut inter, mut union) = (0.0, 0.0);
    for y in 0..res {
        for x in 0..res {
            let hit = hit_t(y, x).is_some();
            let rendered = crop.mask.get(0, y, x) > 0.5;
            inter += (hit && rendered) as u8 as f64;
            union += (hit || rendered) as u8 as f64;
        }
    }
    let iou = inter / union;

    let mut worst_depth: f64 = 0.0;
    let mut interior = 0;
    for ray in &plan.rays {
        let (y, x) = (ray.pixel / res, ray.pixel % res);
        if y == 0 || x == 0 || y == res - 1 || x == res - 1 {
            continue;
        }
        let all_hit = [(y - 1, x), (y + 1, x), (y, x - 1), (y, x + 1), (y, x)].iter().all(|&(r, c)| hit_t(r, c).is_some());
        if !all_hit {
            continue;
        }
        let o = Vector3::from(ray.origin);
        let d = Vector3::from(ray.dir);
        let b = o.dot(&d);
        let t = -b - (b * b - o.norm_squared() + 1.0).sqrt();
        let spacing = (ray.far - ray.near) / cfg.coarse_samples as f64;
        worst_depth = worst_depth.max((crop.depth.get(0, y, x) - t).abs() / spacing);
        interior += 1;
    }

    // Hand computation at the pixel nearest the sphere's projected center.
    let (cu, cv) = camera.project([pose.translation[0], pose.translation[1], pose.translation[2]]);
    let col = ((cu - plan.view.x0) / plan.view.side * res as f64).floor() as usize;
    let row = ((cv - plan.view.y0) / plan.view.side * res as f64).floor() as usize;
    let (t, d) = hit_t(row, col).unwrap();
    let n = (d * t - pose.translation).normalize();
    let l = Vector3::from(light.direction());
    let expected = phong.k_a + phong.k_d * n.dot(&l).max(0.0);
    let got = crop.rgb.get(0, row, col);
    let shade_err = (got - expected).abs() / expected;

    verdict(
        3,
        "analytic sphere forward model",
        &[
            (format!("IoU {iou:.4}"), iou > SILHOUETTE_IOU),
            (format!("depth worst {worst_depth:.2} spacings over {interior} interior pixels"), interior > 0 && worst_depth < 1.0),
            (format!("center shading {got:.4} vs {expected:.4} ({:.1}%)", 100.0 * shade_err), shade_err < SHADING_REL_ERR),
        ],
    );
}

// ---------------------------------------------------------------------------
// Shared training fixtures

fn crops_of(scene: &objint_core::scene::SynthScene, res: usize) -> CropSet {
    let masks: Vec<InstanceMask> = scene.instances.iter().map(|g| InstanceMask::from_mask(&g.mask).unwrap()).collect();
    extract_crops(&scene.rgb, &masks, res).unwrap()
}

fn small_synth() -> SynthConfig {
    SynthConfig { instances: 9, image_size: 96, distance: 40.0, ..SynthConfig::default() }
}

fn small_train(seed: u64) -> TrainConfig {
    TrainConfig {
        resolution: 16,
        batch_size: 4,
        seed,
        field: FieldConfig { latent_dim: 8, sdf_layers: 3, albedo_layers: 2, width: 16, ..FieldConfig::default() },
        pretrain: PretrainConfig { iterations: 300, ..PretrainConfig::default() },
        discriminator: DiscriminatorConfig { widths: vec![8, 16], leaky_slope: 0.2 },
        render: RenderConfig { coarse_samples: 12, importance_samples: 4, ..RenderConfig::default() },
        ..TrainConfig::default()
    }
}

/// A small model trained on a small synthetic scene.
fn small_trained(steps: u64) -> (Trainer, objint_core::scene::SynthScene) {
    let synth = small_synth();
    let scene = synth_scene_generate(&synth, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
    let crops = crops_of(&scene, 16);
    let mut t = Trainer::new(small_train(0), scene.config.scene_config()).unwrap();
    t.train(&crops, steps, None).unwrap();
    (t, scene)
}

// ---------------------------------------------------------------------------
// Criterion 4

fn closed_loop_run(seed: u64) -> (MetricRecord, MetricRecord) {
    let synth = SynthConfig::default();
    let scene = synth_scene_generate(&synth, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
    let dir = tempfile::tempdir().unwrap();
    scene.write(dir.path()).unwrap();
    let data = SynthDataset::load(dir.path()).unwrap();
    let cfg = TrainConfig { seed, iterations: CLOSED_LOOP_STEPS, ..TrainConfig::default() };
    let crops = crops_of(&scene, cfg.resolution);
    let mut trainer = Trainer::new(cfg, scene.config.scene_config()).unwrap();
    let untrained = trainer.generator.clone();
    trainer.train(&crops, CLOSED_LOOP_STEPS, None).unwrap();
    let eval = EvalConfig { inversion: reduced_inversion(seed), ..EvalConfig::default() };
    let render = &trainer.config.render;
    let trained = evaluate_synthetic(&trainer.generator, &data, render, &eval).unwrap().aggregate;
    let baseline = evaluate_synthetic(&untrained, &data, render, &eval).unwrap().aggregate;
    (trained, baseline)
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    v[v.len() / 2]
}

#[test]
#[ignore = "trains 3 x 10k steps at 32x32; many hours on one core"]
fn criterion_4_closed_loop_intrinsics() {
    let _guard = serial();
    let runs: Vec<(MetricRecord, MetricRecord)> = CLOSED_LOOP_SEEDS.iter().map(|&s| closed_loop_run(s)).collect();
    let m = |f: fn(&MetricRecord) -> f64, trained: bool| {
        median(runs.iter().map(|(t, b)| f(if trained { t } else { b })).collect())
    };
    let (depth, depth0) = (m(|r| r.depth_si_mse, true), m(|r| r.depth_si_mse, false));
    let (normal, normal0) = (m(|r| r.normal_deg, true), m(|r| r.normal_deg, false));
    let (albedo, albedo0) = (m(|r| r.albedo_psnr, true), m(|r| r.albedo_psnr, false));
    verdict(
        4,
        "closed-loop intrinsics recovery",
        &[
            (format!("depth si-MSE {depth:.4}"), depth < DEPTH_SI_MSE_MAX),
            (format!("normal {normal:.1} deg"), normal < NORMAL_DEG_MAX),
            (format!("albedo {albedo:.2} dB"), albedo > ALBEDO_PSNR_MIN),
            (format!("depth vs untrained {depth0:.4}"), depth * DEPTH_IMPROVEMENT <= depth0),
            (format!("normal vs untrained {normal0:.1}"), normal + NORMAL_IMPROVEMENT_DEG <= normal0),
            (format!("albedo vs untrained {albedo0:.2}"), albedo >= albedo0 + ALBEDO_IMPROVEMENT_DB),
        ],
    );
}

// ---------------------------------------------------------------------------
// Criterion 5

fn reduced_inversion(seed: u64) -> InversionConfig {
    InversionConfig { latent_samples: 1000, pose_candidates: 200, top_k: 3, steps: 500, seed, ..InversionConfig::default() }
}

fn binary_mask(m: &Raster) -> Raster {
    m.map(|v| if v > 0.5 { 1.0 } else { 0.0 })
}

#[test]
#[ignore = "10 inversions with 200 poses and 3 x 500 refinement steps each"]
fn criterion_5_inversion_self_consistency() {
    let _guard = serial();
    let (t, _) = small_trained(500);
    let scene = &t.scene;
    let render = &t.config.render;
    let res = t.config.resolution;
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let mut good = 0;
    let mut lines = Vec::new();
    for k in 0..SELF_INVERSION_TARGETS {
        let z = sample_latent(&mut rng, t.generator.latent_dim());
        let pose = scene.prior.sample(&scene.camera, &mut rng).unwrap();
        let view = Viewport::for_pose(&pose, &scene.camera, res).unwrap();
        let (target, _) = render_fixed(&t.generator, &z, &pose, &scene.light, &scene.camera, view, render).unwrap();
        let goal = InversionTarget { rgb: target.rgb.clone(), mask: target.mask.clone(), translation: pose.translation, view };
        let inv = invert(&t.generator, &goal, &scene.prior, scene, render, &reduced_inversion(k as u64)).unwrap();
        let (recon, _) =
            render_fixed(&t.generator, &inv.latent, &inv.pose, &scene.light, &scene.camera, view, render).unwrap();
        let mask = binary_mask(&target.mask);
        let p = psnr(&recon.rgb, &target.rgb, &mask).unwrap();
        let e = geodesic_deg(&inv.pose.rotation, &pose.rotation);
        if p > SELF_PSNR_MIN && e < SELF_POSE_DEG_MAX {
            good += 1;
        }
        lines.push(format!("{p:.1}dB/{e:.0}deg"));
    }
    verdict(
        5,
        "inversion self-consistency",
        &[(format!("{good}/{SELF_INVERSION_TARGETS} targets ({})", lines.join(" ")), good >= SELF_INVERSION_REQUIRED)],
    );
}

// ---------------------------------------------------------------------------
// Criterion 6

fn half_luminance(crop: &Raster, mask: &Raster) -> (f64, f64) {
    let w = crop.width();
    let (mut l, mut r, mut nl, mut nr) = (0.0, 0.0, 0.0f64, 0.0f64);
    for y in 0..crop.height() {
        for x in 0..w {
            if mask.get(0, y, x) <= 0.5 {
                continue;
            }
            let lum = 0.299 * crop.get(0, y, x) + 0.587 * crop.get(1, y, x) + 0.114 * crop.get(2, y, x);
            if 2 * x + 1 < w {
                (l, nl) = (l + lum, nl + 1.0);
            } else if 2 * x + 1 > w {
                (r, nr) = (r + lum, nr + 1.0);
            }
        }
    }
    (l / nl.max(1.0), r / nr.max(1.0))
}

#[test]
fn criterion_6_relighting_consistency() {
    let _guard = serial();
    let (t, _) = small_trained(20);
    let scene = &t.scene;
    let render = &t.config.render;
    let res = 32;
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let (mut identical, mut swapped) = (0, 0);
    for _ in 0..RELIGHT_SAMPLES {
        let z = sample_latent(&mut rng, t.generator.latent_dim());
        let pose = scene.prior.sample(&scene.camera, &mut rng).unwrap();
        let view = Viewport::for_pose(&pose, &scene.camera, res).unwrap();
        let (standard, _) = render_fixed(&t.generator, &z, &pose, &scene.light, &scene.camera, view, render).unwrap();
        let lights = [scene.light, scene.light.mirrored_x()];
        let lit = relight(&t.generator, &z, &pose, &lights, &scene.camera, view, render).unwrap();
        identical += usize::from(lit[0] == standard);
        let (l0, r0) = half_luminance(&lit[0].rgb, &lit[0].mask);
        let (l1, r1) = half_luminance(&lit[1].rgb, &lit[1].mask);
        swapped += usize::from((l0 > r0) != (l1 > r1) && l0 != r0 && l1 != r1);
    }
    verdict(
        6,
        "relighting consistency",
        &[
            (format!("training light bit-identical {identical}/{RELIGHT_SAMPLES}"), identical == RELIGHT_SAMPLES),
            (format!("mirrored light swaps lit half {swapped}/{RELIGHT_SAMPLES}"), swapped >= RELIGHT_REQUIRED),
        ],
    );
}

// ---------------------------------------------------------------------------
// Criterion 7

fn tiny_train(seed: u64) -> TrainConfig {
    TrainConfig {
        resolution: 8,
        batch_size: 2,
        seed,
        field: FieldConfig { latent_dim: 4, sdf_layers: 2, albedo_layers: 2, width: 8, ..FieldConfig::default() },
        pretrain: PretrainConfig { iterations: 20, ..PretrainConfig::default() },
        discriminator: DiscriminatorConfig { widths: vec![4, 8], leaky_slope: 0.2 },
        render: RenderConfig { coarse_samples: 8, importance_samples: 2, ..RenderConfig::default() },
        ..TrainConfig::default()
    }
}

fn histogram(values: &[f64], lo: f64, hi: f64, bins: usize) -> Vec<f64> {
    let mut h = vec![0.0; bins];
    for v in values {
        let k = (((v - lo) / (hi - lo)) * bins as f64).floor().clamp(0.0, (bins - 1) as f64) as usize;
        h[k] += 1.0;
    }
    h
}

/// Two-sample chi-square statistic for equal-size samples.
fn chi_square(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).filter(|(x, y)| **x + **y > 0.0).map(|(x, y)| (x - y) * (x - y) / (x + y)).sum()
}

fn mask_restricted_metrics_ignore_outside() -> bool {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let n = 16;
    let mask = Raster::from_fn(1, n, n, |_, y, x| if (y as f64 - 7.5).hypot(x as f64 - 7.5) < 5.0 { 1.0 } else { 0.0 });
    let mut img = |c: usize, lo: f64| Raster::from_fn(c, n, n, |_, _, _| lo + rng.gen::<f64>());
    let (a, b) = (img(3, 0.0), img(3, 0.0));
    let (da, db) = (img(1, 1.0), img(1, 1.0));
    let (na, nb) = (img(3, -0.5), img(3, -0.5));
    let unit = |r: &Raster| {
        Raster::from_fn(3, n, n, |c, y, x| {
            let v = [r.get(0, y, x), r.get(1, y, x), r.get(2, y, x)];
            let l = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
            v[c] / l
        })
    };
    let (na, nb) = (unit(&na), unit(&nb));
    let scores = |a: &Raster, da: &Raster, na: &Raster| {
        let al = si_albedo_metrics(a, &b, &mask).unwrap();
        [
            psnr(a, &b, &mask).unwrap(),
            ssim(a, &b, &mask).unwrap(),
            si_depth_mse(da, &db, &mask).unwrap(),
            normal_angle_error(na, &nb, &mask).unwrap(),
            al.psnr,
            al.ssim,
        ]
    };
    let before = scores(&a, &da, &na);
    let outside = |r: &Raster, v: f64| {
        Raster::from_fn(r.channels(), n, n, |c, y, x| if mask.get(0, y, x) > 0.5 { r.get(c, y, x) } else { v })
    };
    let after = scores(&outside(&a, 0.9), &outside(&da, 40.0), &outside(&na, 0.577));
    before == after
}

#[test]
fn criterion_7_pipeline_invariants() {
    let _guard = serial();
    let start = Instant::now();
    let synth = small_synth();
    let scene = synth_scene_generate(&synth, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
    let crops = crops_of(&scene, 8);
    let scene_cfg: SceneConfig = scene.config.scene_config();
    let mut checks = Vec::new();

    // Objective report: the four terms plus the gradient penalty, all finite.
    let mut a = Trainer::new(tiny_train(3), scene_cfg.clone()).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let log_path = dir.path().join("losses.jsonl");
    let mut log = objint_core::training::LossLog::open(&log_path).unwrap();
    let reports = a.train(&crops, 3, Some(&mut log)).unwrap();
    drop(log);
    let line: serde_json::Value =
        serde_json::from_str(std::fs::read_to_string(&log_path).unwrap().lines().next().unwrap()).unwrap();
    let mut keys: Vec<&String> = line.as_object().unwrap().keys().collect();
    keys.sort();
    let expected = ["adversarial", "eikonal", "mask", "pose", "r1", "step"];
    let report_ok = keys.iter().map(|k| k.as_str()).eq(expected)
        && reports.iter().all(|r| r.terms().iter().all(|(_, v)| v.is_finite() && *v >= 0.0));
    checks.push(("four-term report".to_string(), report_ok));

    // Weighting is linear: doubling a weight doubles its term exactly.
    let first = |cfg: TrainConfig| Trainer::new(cfg, scene_cfg.clone()).unwrap().train_step(&crops).unwrap();
    let base = first(tiny_train(4));
    let eik2 = first(TrainConfig { lambda_eikonal: 20.0, ..tiny_train(4) });
    let pose2 = first(TrainConfig { lambda_pose: 2.0, ..tiny_train(4) });
    let linear = eik2.eikonal == 2.0 * base.eikonal && pose2.pose == 2.0 * base.pose && base.eikonal > 0.0;
    checks.push(("weight linearity".to_string(), linear));

    // Real and fake branches draw transforms from one distribution.
    let params = AugmentParams::default();
    let draw = |seed: u64| -> Vec<AugmentTransform> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..20_000).map(|_| params.sample(&mut rng)).collect()
    };
    let (real, fake) = (draw(100), draw(200));
    let mut worst_chi: f64 = 0.0;
    let (lo, hi) = (params.scale[0].ln(), params.scale[1].ln());
    let t = params.translation;
    let fields: [(&dyn Fn(&AugmentTransform) -> f64, f64, f64); 3] =
        [(&|x| x.scale.ln(), lo, hi), (&|x| x.shift[0], -t, t), (&|x| x.shift[1], -t, t)];
    for (f, lo, hi) in fields {
        let ha = histogram(&real.iter().map(f).collect::<Vec<_>>(), lo, hi, 20);
        let hb = histogram(&fake.iter().map(f).collect::<Vec<_>>(), lo, hi, 20);
        worst_chi = worst_chi.max(chi_square(&ha, &hb));
    }
    let always = real.iter().chain(&fake).all(|x| *x != AugmentTransform::IDENTITY);
    checks.push((format!("augmentation histograms chi2 {worst_chi:.1}"), worst_chi < CHI2_CRITICAL && always));

    // Determinism and resume.
    let mut b = Trainer::new(tiny_train(3), scene_cfg.clone()).unwrap();
    b.train(&crops, 3, None).unwrap();
    let same = Checkpoint::from_trainer(&a).to_bytes() == Checkpoint::from_trainer(&b).to_bytes();
    let saved = Checkpoint::from_trainer(&a).to_bytes();
    let straight = a.train(&crops, 10, None).unwrap();
    let mut resumed = Checkpoint::from_bytes(&saved).unwrap().into_trainer(None, false).unwrap();
    let again = resumed.train(&crops, 10, None).unwrap();
    let resume_ok = straight == again && Checkpoint::from_trainer(&a).to_bytes() == Checkpoint::from_trainer(&resumed).to_bytes();
    checks.push(("determinism".to_string(), same));
    checks.push(("resume over 10 steps".to_string(), resume_ok));

    checks.push(("mask-restricted metrics".to_string(), mask_restricted_metrics_ignore_outside()));
    let elapsed = start.elapsed();
    checks.push((format!("{:.1}s", elapsed.as_secs_f64()), elapsed < INVARIANT_BUDGET));
    verdict(7, "pipeline invariants", &checks);
}
