//! Renderable models: the learnable generator and closed-form reference objects.

use objint_autodiff::{Tape, Tensor, Var};
use rand::Rng;

use crate::error::{Error, Result};
use crate::fields::analytic::AnalyticObject;
use crate::fields::{AlbedoField, AlbedoQuery, FieldConfig, LatentCode, SdfField, SdfQuery};
use crate::shading::PhongParams;

/// Initial sharpness of the logistic density.
pub const INITIAL_SCALE: f64 = 10.0;
pub const MIN_SCALE: f64 = 0.01;
pub const MAX_SCALE: f64 = 1e4;

/// Which inputs of a bound model are recorded as differentiable leaves.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BindMode {
    pub params: bool,
    pub latent: bool,
}

impl BindMode {
    pub const FROZEN: Self = Self { params: false, latent: false };
    pub const PARAMS: Self = Self { params: true, latent: false };
    pub const LATENT: Self = Self { params: false, latent: true };
}

/// A model recorded on one tape for one latent code.
pub struct BoundModel {
    pub sdf: Box<dyn SdfQuery>,
    pub albedo: Box<dyn AlbedoQuery>,
    /// Material scalars `[1, 4]`.
    pub phong: Var,
    /// Logistic sharpness `s` as `[1, 1]`.
    pub scale: Var,
    /// Parameter leaves in [`Generator::params`] order (empty unless bound trainable).
    pub params: Vec<Var>,
    pub latent: Var,
}

pub trait RenderModel: Sync {
    fn bind(&self, tape: &mut Tape, z: &LatentCode, mode: BindMode) -> Result<BoundModel>;

    /// Current logistic sharpness.
    fn scale(&self) -> f64;
}

/// Latent-conditioned SDF and albedo fields plus global shading scalars.
#[derive(Clone, Debug, PartialEq)]
pub struct Generator {
    pub sdf: SdfField,
    pub albedo: AlbedoField,
    /// `[k_d, k_a, k_s, α]` as `[1, 4]`.
    pub phong: Tensor,
    /// `log s` as `[1, 1]`.
    pub log_scale: Tensor,
}

impl Generator {
    pub fn new(rng: &mut impl Rng, cfg: &FieldConfig) -> Result<Self> {
        Ok(Self {
            sdf: SdfField::new(rng, cfg)?,
            albedo: AlbedoField::new(rng, cfg)?,
            phong: PhongParams::default().to_tensor(),
            log_scale: Tensor::new(vec![1, 1], vec![INITIAL_SCALE.ln()])?,
        })
    }

    pub fn latent_dim(&self) -> usize {
        self.sdf.net.latent_dim()
    }

    pub fn params(&self) -> Vec<&Tensor> {
        let mut out: Vec<&Tensor> = self.sdf.net.params().iter().collect();
        out.extend(self.albedo.net.params().iter());
        out.push(&self.phong);
        out.push(&self.log_scale);
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out: Vec<&mut Tensor> = self.sdf.net.params_mut().iter_mut().collect();
        out.extend(self.albedo.net.params_mut().iter_mut());
        out.push(&mut self.phong);
        out.push(&mut self.log_scale);
        out
    }

    /// Index ranges of the parameter groups within [`Self::params`].
    pub fn groups(&self) -> ParamGroups {
        let n_sdf = self.sdf.net.params().len();
        let n_alb = self.albedo.net.params().len();
        ParamGroups { sdf: 0..n_sdf, albedo: n_sdf..n_sdf + n_alb, phong: n_sdf + n_alb, scale: n_sdf + n_alb + 1 }
    }

    pub fn phong_params(&self) -> PhongParams {
        PhongParams::from_tensor(&self.phong).expect("phong tensor has four entries")
    }

    /// Restores the constraints after a gradient step: non-negative shading
    /// scalars and `s` within `[MIN_SCALE, MAX_SCALE]`.
    pub fn project(&mut self) {
        PhongParams::project(&mut self.phong);
        let (lo, hi) = (MIN_SCALE.ln(), MAX_SCALE.ln());
        self.log_scale.data_mut().iter_mut().for_each(|v| *v = v.clamp(lo, hi));
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ParamGroups {
    pub sdf: std::ops::Range<usize>,
    pub albedo: std::ops::Range<usize>,
    pub phong: usize,
    pub scale: usize,
}

fn latent_var(tape: &mut Tape, z: &LatentCode, leaf: bool) -> Var {
    if leaf {
        tape.leaf(z.to_tensor())
    } else {
        tape.constant(z.to_tensor())
    }
}

impl RenderModel for Generator {
    fn bind(&self, tape: &mut Tape, z: &LatentCode, mode: BindMode) -> Result<BoundModel> {
        if z.dim() != self.latent_dim() {
            return Err(Error::invalid(format!("latent has {} entries, model expects {}", z.dim(), self.latent_dim())));
        }
        let latent = latent_var(tape, z, mode.latent);
        let sdf = self.sdf.bind(tape, latent, mode.params)?;
        let albedo = self.albedo.bind(tape, latent, mode.params)?;
        let (phong, log_s) = if mode.params {
            (tape.leaf(self.phong.clone()), tape.leaf(self.log_scale.clone()))
        } else {
            (tape.constant(self.phong.clone()), tape.constant(self.log_scale.clone()))
        };
        let params = if mode.params {
            let mut v = sdf.0.param_vars().to_vec();
            v.extend_from_slice(albedo.0.param_vars());
            v.push(phong);
            v.push(log_s);
            v
        } else {
            Vec::new()
        };
        let scale = tape.exp(log_s)?;
        Ok(BoundModel { sdf: Box::new(sdf), albedo: Box::new(albedo), phong, scale, params, latent })
    }

    fn scale(&self) -> f64 {
        self.log_scale.data()[0].exp()
    }
}

/// A closed-form object rendered with fixed shading; ignores the latent code.
#[derive(Clone, Debug, PartialEq)]
pub struct AnalyticModel {
    pub object: AnalyticObject,
    pub phong: PhongParams,
    pub scale: f64,
}

impl AnalyticModel {
    pub fn new(object: AnalyticObject, phong: PhongParams, scale: f64) -> Result<Self> {
        if !(MIN_SCALE..=MAX_SCALE).contains(&scale) || !phong.is_valid() {
            return Err(Error::invalid("analytic model needs a valid scale and non-negative shading"));
        }
        Ok(Self { object, phong, scale })
    }
}

impl RenderModel for AnalyticModel {
    fn bind(&self, tape: &mut Tape, z: &LatentCode, mode: BindMode) -> Result<BoundModel> {
        let latent = latent_var(tape, z, mode.latent);
        let phong = tape.constant(self.phong.to_tensor());
        let scale = tape.constant(Tensor::new(vec![1, 1], vec![self.scale])?);
        Ok(BoundModel {
            sdf: Box::new(self.object.clone()),
            albedo: Box::new(self.object.clone()),
            phong,
            scale,
            params: Vec::new(),
            latent,
        })
    }

    fn scale(&self) -> f64 {
        self.scale
    }
}
