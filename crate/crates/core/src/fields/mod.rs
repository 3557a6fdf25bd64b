//! Latent-conditioned SDF and albedo fields built from sine-activated MLPs.

use log::{info, warn};
use objint_autodiff::{Tape, Tensor, Var};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::training::adam::{AdamConfig, AdamState};

pub mod analytic;

pub const LATENT_DIM: usize = 64;

/// Instance identity `z`, a draw from a standard normal.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentCode(Vec<f64>);

impl LatentCode {
    pub fn new(values: Vec<f64>) -> Self {
        Self(values)
    }

    pub fn zeros(dim: usize) -> Self {
        Self(vec![0.0; dim])
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    /// Row tensor `[1, dim]`.
    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(vec![1, self.0.len()], self.0.clone()).expect("row shape")
    }

    pub fn mean(codes: &[LatentCode]) -> Result<Self> {
        let first = codes.first().ok_or_else(|| Error::invalid("mean of zero latent codes"))?;
        let mut acc = vec![0.0; first.dim()];
        for c in codes {
            for (a, v) in acc.iter_mut().zip(&c.0) {
                *a += v;
            }
        }
        let n = codes.len() as f64;
        Ok(Self(acc.into_iter().map(|a| a / n).collect()))
    }

    pub fn lerp(a: &LatentCode, b: &LatentCode, t: f64) -> Self {
        Self(a.0.iter().zip(&b.0).map(|(x, y)| x + t * (y - x)).collect())
    }
}

/// Draws a `dim`-dimensional code with i.i.d. N(0, 1) entries.
pub fn sample_latent<R: Rng + ?Sized>(rng: &mut R, dim: usize) -> LatentCode {
    LatentCode((0..dim).map(|_| rng.sample::<f64, _>(StandardNormal)).collect())
}

/// Mean of `n` freshly sampled latent codes.
pub fn average_latent<R: Rng + ?Sized>(rng: &mut R, dim: usize, n: usize) -> Result<LatentCode> {
    if n == 0 {
        return Err(Error::invalid("latent averaging needs at least one sample"));
    }
    let mut acc = vec![0.0; dim];
    for _ in 0..n {
        for a in acc.iter_mut() {
            *a += rng.sample::<f64, _>(StandardNormal);
        }
    }
    Ok(LatentCode(acc.into_iter().map(|a| a / n as f64).collect()))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FieldConfig {
    pub latent_dim: usize,
    pub sdf_layers: usize,
    pub albedo_layers: usize,
    pub width: usize,
    pub omega_first: f64,
    pub omega_hidden: f64,
}

impl Default for FieldConfig {
    fn default() -> Self {
        Self {
            latent_dim: LATENT_DIM,
            sdf_layers: 4,
            albedo_layers: 3,
            width: 64,
            omega_first: 30.0,
            omega_hidden: 1.0,
        }
    }
}

/// Sine-activated MLP over `[x ; z]` with a linear output layer.
///
/// Parameters are stored as `[W0, b0, W1, b1, .., Wout, bout]` with weights
/// shaped `[out, in]` and biases `[1, out]`.
#[derive(Clone, Debug, PartialEq)]
pub struct SirenMlp {
    latent_dim: usize,
    width: usize,
    sine_layers: usize,
    out_dim: usize,
    omega_first: f64,
    omega_hidden: f64,
    params: Vec<Tensor>,
}

fn uniform(rng: &mut impl Rng, shape: Vec<usize>, bound: f64) -> Tensor {
    Tensor::from_fn(shape, |_| rng.gen_range(-bound..bound))
}

impl SirenMlp {
    pub fn new(
        rng: &mut impl Rng,
        latent_dim: usize,
        width: usize,
        sine_layers: usize,
        out_dim: usize,
        omega_first: f64,
        omega_hidden: f64,
    ) -> Result<Self> {
        if sine_layers == 0 || width == 0 || out_dim == 0 {
            return Err(Error::Config("SIREN needs at least one sine layer of nonzero width".into()));
        }
        let mut params = Vec::with_capacity(2 * sine_layers + 2);
        let mut fan_in = 3 + latent_dim;
        for l in 0..sine_layers {
            let omega = if l == 0 { omega_first } else { omega_hidden };
            let bound = (6.0 / fan_in as f64).sqrt() / omega;
            params.push(uniform(rng, vec![width, fan_in], bound));
            params.push(uniform(rng, vec![1, width], 1.0 / (fan_in as f64).sqrt()));
            fan_in = width;
        }
        let bound = (6.0 / width as f64).sqrt() / omega_hidden;
        params.push(uniform(rng, vec![out_dim, width], bound));
        params.push(uniform(rng, vec![1, out_dim], 1.0 / (width as f64).sqrt()));
        Ok(Self { latent_dim, width, sine_layers, out_dim, omega_first, omega_hidden, params })
    }

    pub fn params(&self) -> &[Tensor] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor] {
        &mut self.params
    }

    pub fn latent_dim(&self) -> usize {
        self.latent_dim
    }

    pub fn width(&self) -> usize {
        self.width
    }

    fn omega(&self, layer: usize) -> f64 {
        if layer == 0 {
            self.omega_first
        } else {
            self.omega_hidden
        }
    }

    /// Records the parameters on `tape` (as leaves when `trainable`) and folds
    /// the latent code into the first-layer bias.
    pub fn bind(&self, tape: &mut Tape, latent: Var, trainable: bool) -> Result<BoundMlp> {
        let vars: Vec<Var> = self
            .params
            .iter()
            .map(|p| if trainable { tape.leaf(p.clone()) } else { tape.constant(p.clone()) })
            .collect();
        self.bind_vars(tape, latent, vars)
    }

    fn check_latent(&self, tape: &Tape, latent: Var) -> Result<()> {
        if tape.shape(latent) != [1, self.latent_dim] {
            return Err(Error::invalid(format!(
                "latent shape {:?}, expected [1, {}]",
                tape.shape(latent),
                self.latent_dim
            )));
        }
        Ok(())
    }

    /// Like [`Self::bind`] with caller-provided parameter variables.
    pub fn bind_vars(&self, tape: &mut Tape, latent: Var, vars: Vec<Var>) -> Result<BoundMlp> {
        self.check_latent(tape, latent)?;
        if vars.len() != self.params.len() {
            return Err(Error::invalid("parameter variable count does not match the network"));
        }
        let w0 = vars[0];
        let x_weight = tape.slice(w0, 1, 0, 3)?;
        let x_weight_t = tape.transpose(x_weight)?;
        let z_weight = tape.slice(w0, 1, 3, 3 + self.latent_dim)?;
        let z_weight_t = tape.transpose(z_weight)?;
        let zb = tape.matmul(latent, z_weight_t)?;
        let latent_bias = tape.add(zb, vars[1])?;
        let mut weights_t = Vec::with_capacity(self.sine_layers);
        for l in 1..=self.sine_layers {
            weights_t.push(tape.transpose(vars[2 * l])?);
        }
        Ok(BoundMlp {
            vars,
            x_weight,
            x_weight_t,
            latent_bias,
            weights_t,
            omegas: (0..self.sine_layers).map(|l| self.omega(l)).collect(),
        })
    }
}

/// A [`SirenMlp`] recorded on a tape for one latent code.
pub struct BoundMlp {
    vars: Vec<Var>,
    x_weight: Var,
    x_weight_t: Var,
    latent_bias: Var,
    /// Transposed weights of the sine layers after the first, then the output layer.
    weights_t: Vec<Var>,
    omegas: Vec<f64>,
}

impl BoundMlp {
    pub fn param_vars(&self) -> &[Var] {
        &self.vars
    }

    /// Returns the output `[P, out]` and the scaled pre-activations of every sine layer.
    fn forward_inner(&self, tape: &mut Tape, points: Var) -> Result<(Var, Vec<Var>)> {
        let layers = self.omegas.len();
        let mut args = Vec::with_capacity(layers);
        let p = tape.matmul(points, self.x_weight_t)?;
        let p = tape.add(p, self.latent_bias)?;
        let a = tape.scale(p, self.omegas[0])?;
        let mut h = tape.sin(a)?;
        args.push(a);
        for l in 1..layers {
            let p = tape.matmul(h, self.weights_t[l - 1])?;
            let p = tape.add(p, self.vars[2 * l + 1])?;
            let a = tape.scale(p, self.omegas[l])?;
            h = tape.sin(a)?;
            args.push(a);
        }
        let out = tape.matmul(h, self.weights_t[layers - 1])?;
        let out = tape.add(out, self.vars[2 * layers + 1])?;
        Ok((out, args))
    }

    pub fn forward(&self, tape: &mut Tape, points: Var) -> Result<Var> {
        Ok(self.forward_inner(tape, points)?.0)
    }

    /// Scalar output together with its spatial gradient `[P, 3]`, built from
    /// tape ops so that it stays differentiable with respect to the parameters.
    pub fn forward_with_input_grad(&self, tape: &mut Tape, points: Var) -> Result<(Var, Var)> {
        let (out, args) = self.forward_inner(tape, points)?;
        let layers = args.len();
        let out_weight = self.vars[2 * layers];
        if tape.shape(out_weight)[0] != 1 {
            return Err(Error::invalid("input gradient requires a scalar-output network"));
        }
        let mut delta = out_weight;
        for l in (0..layers).rev() {
            let c = tape.cos(args[l])?;
            let c = tape.scale(c, self.omegas[l])?;
            delta = tape.mul(c, delta)?;
            if l > 0 {
                delta = tape.matmul(delta, self.vars[2 * l])?;
            }
        }
        let grad = tape.matmul(delta, self.x_weight)?;
        Ok((out, grad))
    }
}

/// Anything that yields signed distances and their spatial gradients on a tape.
pub trait SdfQuery {
    /// Signed distance `[P, 1]` at object-frame points `[P, 3]`.
    fn sdf(&self, tape: &mut Tape, points: Var) -> Result<Var>;

    /// Signed distance `[P, 1]` and gradient `[P, 3]`.
    fn sdf_and_grad(&self, tape: &mut Tape, points: Var) -> Result<(Var, Var)>;
}

pub trait AlbedoQuery {
    /// Albedo `[P, 3]` in (0, 1).
    fn albedo(&self, tape: &mut Tape, points: Var) -> Result<Var>;
}

#[derive(Clone, Debug, PartialEq)]
pub struct SdfField {
    pub net: SirenMlp,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AlbedoField {
    pub net: SirenMlp,
}

impl SdfField {
    pub fn new(rng: &mut impl Rng, cfg: &FieldConfig) -> Result<Self> {
        let net = SirenMlp::new(
            rng,
            cfg.latent_dim,
            cfg.width,
            cfg.sdf_layers,
            1,
            cfg.omega_first,
            cfg.omega_hidden,
        )?;
        Ok(Self { net })
    }

    pub fn bind(&self, tape: &mut Tape, latent: Var, trainable: bool) -> Result<BoundSdf> {
        Ok(BoundSdf(self.net.bind(tape, latent, trainable)?))
    }
}

impl AlbedoField {
    pub fn new(rng: &mut impl Rng, cfg: &FieldConfig) -> Result<Self> {
        let net = SirenMlp::new(
            rng,
            cfg.latent_dim,
            cfg.width,
            cfg.albedo_layers,
            3,
            cfg.omega_first,
            cfg.omega_hidden,
        )?;
        Ok(Self { net })
    }

    pub fn bind(&self, tape: &mut Tape, latent: Var, trainable: bool) -> Result<BoundAlbedo> {
        Ok(BoundAlbedo(self.net.bind(tape, latent, trainable)?))
    }
}

pub struct BoundSdf(pub BoundMlp);

pub struct BoundAlbedo(pub BoundMlp);

impl SdfQuery for BoundSdf {
    fn sdf(&self, tape: &mut Tape, points: Var) -> Result<Var> {
        self.0.forward(tape, points)
    }

    fn sdf_and_grad(&self, tape: &mut Tape, points: Var) -> Result<(Var, Var)> {
        self.0.forward_with_input_grad(tape, points)
    }
}

impl AlbedoQuery for BoundAlbedo {
    fn albedo(&self, tape: &mut Tape, points: Var) -> Result<Var> {
        let raw = self.0.forward(tape, points)?;
        Ok(tape.sigmoid(raw)?)
    }
}

pub(crate) fn points_tensor(points: &[[f64; 3]]) -> Tensor {
    Tensor::new(vec![points.len(), 3], points.iter().flatten().copied().collect()).expect("[P,3]")
}

/// Signed distance of the field at one point.
pub fn sdf_eval(field: &SdfField, x: [f64; 3], z: &LatentCode) -> Result<f64> {
    Ok(sdf_values(field, z, &[x])?[0])
}

pub fn sdf_values(field: &SdfField, z: &LatentCode, points: &[[f64; 3]]) -> Result<Vec<f64>> {
    let mut tape = Tape::new();
    let zv = tape.constant(z.to_tensor());
    let bound = field.bind(&mut tape, zv, false)?;
    let p = tape.constant(points_tensor(points));
    let f = bound.sdf(&mut tape, p)?;
    Ok(tape.value(f).data().to_vec())
}

/// Norm below which a gradient is treated as degenerate.
pub const DEGENERATE_GRADIENT: f64 = 1e-8;

/// Normalizes a gradient, or `None` when it is degenerate.
pub fn normalize_gradient(g: [f64; 3]) -> Option<[f64; 3]> {
    let n = (g[0] * g[0] + g[1] * g[1] + g[2] * g[2]).sqrt();
    (n > DEGENERATE_GRADIENT).then(|| [g[0] / n, g[1] / n, g[2] / n])
}

/// Unit surface normal `∇f/‖∇f‖` at `x`; `None` flags a degenerate gradient.
pub fn sdf_normal(field: &SdfField, x: [f64; 3], z: &LatentCode) -> Result<Option<[f64; 3]>> {
    let mut tape = Tape::new();
    let zv = tape.constant(z.to_tensor());
    let bound = field.bind(&mut tape, zv, false)?;
    Ok(query_normals(&mut tape, &bound, &[x])?.pop().flatten())
}

/// Normals of any SDF source at a batch of points.
pub fn query_normals<Q: SdfQuery>(
    tape: &mut Tape,
    field: &Q,
    points: &[[f64; 3]],
) -> Result<Vec<Option<[f64; 3]>>> {
    let p = tape.constant(points_tensor(points));
    let (_, g) = field.sdf_and_grad(tape, p)?;
    let gd = tape.value(g).data();
    Ok(gd.chunks_exact(3).map(|c| normalize_gradient([c[0], c[1], c[2]])).collect())
}

/// Mean over points of `(‖∇f‖ - 1)²`.
pub fn eikonal_loss<Q: SdfQuery>(tape: &mut Tape, field: &Q, points: Var) -> Result<Var> {
    if tape.shape(points).first().copied().unwrap_or(0) == 0 {
        return Err(Error::invalid("eikonal loss over an empty point batch"));
    }
    let (_, g) = field.sdf_and_grad(tape, points)?;
    eikonal_from_grad(tape, g)
}

pub fn eikonal_from_grad(tape: &mut Tape, grad: Var) -> Result<Var> {
    let n = tape.norm_last(grad)?;
    let d = tape.add_scalar(n, -1.0)?;
    let d = tape.square(d)?;
    Ok(tape.mean(d)?)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PretrainConfig {
    pub radius: f64,
    pub iterations: usize,
    pub learning_rate: f64,
    pub tolerance: f64,
    pub latents_per_batch: usize,
    pub points_per_latent: usize,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            radius: 1.0,
            iterations: 5000,
            learning_rate: 3e-4,
            tolerance: 0.02,
            latents_per_batch: 32,
            points_per_latent: 16,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PretrainReport {
    pub iterations: usize,
    pub mean_abs_error: f64,
    pub converged: bool,
}

pub(crate) fn random_points(rng: &mut impl Rng, n: usize, half_extent: f64) -> Vec<[f64; 3]> {
    (0..n)
        .map(|_| {
            [
                rng.gen_range(-half_extent..half_extent),
                rng.gen_range(-half_extent..half_extent),
                rng.gen_range(-half_extent..half_extent),
            ]
        })
        .collect()
}

fn sphere_target(points: &[[f64; 3]], radius: f64) -> Tensor {
    Tensor::from_fn(vec![points.len(), 1], |i| {
        let p = points[i];
        (p[0] * p[0] + p[1] * p[1] + p[2] * p[2]).sqrt() - radius
    })
}

/// Mean `|f(x, z) - (‖x‖ - radius)|` over held-out points and latents.
pub fn sphere_fit_error(
    field: &SdfField,
    radius: f64,
    points: &[[f64; 3]],
    latents: &[LatentCode],
) -> Result<f64> {
    let target = sphere_target(points, radius);
    let mut total = 0.0;
    for z in latents {
        let f = sdf_values(field, z, points)?;
        total += f.iter().zip(target.data()).map(|(a, b)| (a - b).abs()).sum::<f64>();
    }
    Ok(total / (points.len() * latents.len()) as f64)
}

/// Regresses the SDF onto a centred sphere of `cfg.radius` over random
/// points in `[-1.5, 1.5]³` and random latents.
pub fn sphere_init_pretrain(
    field: &mut SdfField,
    cfg: &PretrainConfig,
    rng: &mut impl Rng,
) -> Result<PretrainReport> {
    if cfg.iterations == 0 {
        return Err(Error::Config("sphere pretraining needs at least one iteration".into()));
    }
    let dim = field.net.latent_dim();
    let held_points = random_points(rng, 256, 1.5);
    let held_latents: Vec<LatentCode> = (0..4).map(|_| sample_latent(rng, dim)).collect();
    let mut adam = AdamState::new(field.net.params(), AdamConfig { beta1: 0.9, beta2: 0.999, eps: 1e-8 });
    let mut error = f64::INFINITY;
    let mut done = 0;
    for it in 0..cfg.iterations {
        let mut grads: Vec<Tensor> =
            field.net.params().iter().map(|p| Tensor::zeros(p.shape().to_vec())).collect();
        for _ in 0..cfg.latents_per_batch {
            let z = sample_latent(rng, dim);
            let pts = random_points(rng, cfg.points_per_latent, 1.5);
            let mut tape = Tape::new();
            let zv = tape.constant(z.to_tensor());
            let bound = field.bind(&mut tape, zv, true)?;
            let p = tape.constant(points_tensor(&pts));
            let f = bound.sdf(&mut tape, p)?;
            let t = tape.constant(sphere_target(&pts, cfg.radius));
            let d = tape.sub(f, t)?;
            let d = tape.square(d)?;
            let loss = tape.mean(d)?;
            let g = tape.backward(loss)?;
            for (acc, &v) in grads.iter_mut().zip(bound.0.param_vars()) {
                let gv = g.wrt(v);
                for (a, b) in acc.data_mut().iter_mut().zip(gv.data()) {
                    *a += b / cfg.latents_per_batch as f64;
                }
            }
        }
        let mut params: Vec<&mut Tensor> = field.net.params_mut().iter_mut().collect();
        adam.update(&mut params, &grads, cfg.learning_rate);
        done = it + 1;
        if done % 100 == 0 || done == cfg.iterations {
            error = sphere_fit_error(field, cfg.radius, &held_points, &held_latents)?;
            if error < cfg.tolerance {
                break;
            }
        }
    }
    let converged = error < cfg.tolerance;
    if converged {
        info!("sphere pretraining reached mean |error| {error:.4} after {done} iterations");
    } else {
        warn!("sphere pretraining stopped at mean |error| {error:.4} after {done} iterations");
    }
    Ok(PretrainReport { iterations: done, mean_abs_error: error, converged })
}
