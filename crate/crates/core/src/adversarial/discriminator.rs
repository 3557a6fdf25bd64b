//! Strided convolutional critics for image and mask crops.

use objint_autodiff::{Tape, Tensor, Var};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const KERNEL: usize = 4;
const STRIDE: usize = 2;
const PAD: usize = 1;
/// Outputs of the rotation head: the first two columns of a rotation matrix.
pub const POSE_DIM: usize = 6;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DiscriminatorConfig {
    /// Output channels of each stride-2 convolution.
    pub widths: Vec<usize>,
    pub leaky_slope: f64,
}

impl Default for DiscriminatorConfig {
    fn default() -> Self {
        Self { widths: vec![32, 64, 128, 256], leaky_slope: 0.2 }
    }
}

impl DiscriminatorConfig {
    pub fn validate(&self, resolution: usize) -> Result<()> {
        let down = 1usize << self.widths.len();
        if self.widths.is_empty() || self.widths.contains(&0) || !resolution.is_multiple_of(down) || resolution < down {
            return Err(Error::Config(format!(
                "discriminator with {} stride-2 layers needs a resolution divisible by {down}, got {resolution}",
                self.widths.len()
            )));
        }
        Ok(())
    }
}

/// Convolution stack followed by a realness logit and an optional rotation head.
///
/// Parameters are ordered `[W1, b1, ..., WL, bL, W_logit, b_logit, (W_pose, b_pose)]`;
/// conv weights are `[out, in, 4, 4]`, biases `[1, out, 1, 1]`, head weights `[features, k]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Discriminator {
    in_channels: usize,
    resolution: usize,
    slope: f64,
    layers: usize,
    pose_head: bool,
    params: Vec<Tensor>,
}

fn uniform(rng: &mut impl Rng, shape: Vec<usize>, bound: f64) -> Tensor {
    Tensor::from_fn(shape, |_| rng.gen_range(-bound..bound))
}

impl Discriminator {
    pub fn new(
        rng: &mut impl Rng,
        cfg: &DiscriminatorConfig,
        in_channels: usize,
        resolution: usize,
        pose_head: bool,
    ) -> Result<Self> {
        cfg.validate(resolution)?;
        let gain = (2.0 / (1.0 + cfg.leaky_slope * cfg.leaky_slope)).sqrt();
        let mut params = Vec::new();
        let mut c_in = in_channels;
        for &c_out in &cfg.widths {
            let fan_in = (c_in * KERNEL * KERNEL) as f64;
            params.push(uniform(rng, vec![c_out, c_in, KERNEL, KERNEL], gain * (3.0 / fan_in).sqrt()));
            params.push(Tensor::zeros(vec![1, c_out, 1, 1]));
            c_in = c_out;
        }
        let side = resolution >> cfg.widths.len();
        let features = c_in * side * side;
        let bound = (3.0 / features as f64).sqrt();
        params.push(uniform(rng, vec![features, 1], bound));
        params.push(Tensor::zeros(vec![1, 1]));
        if pose_head {
            params.push(uniform(rng, vec![features, POSE_DIM], bound));
            params.push(Tensor::zeros(vec![1, POSE_DIM]));
        }
        Ok(Self { in_channels, resolution, slope: cfg.leaky_slope, layers: cfg.widths.len(), pose_head, params })
    }

    pub fn params(&self) -> &[Tensor] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor] {
        &mut self.params
    }

    pub fn in_channels(&self) -> usize {
        self.in_channels
    }

    pub fn resolution(&self) -> usize {
        self.resolution
    }

    pub fn has_pose_head(&self) -> bool {
        self.pose_head
    }

    /// Records the parameters on `tape`, as leaves when `trainable`.
    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> BoundDiscriminator<'_> {
        let params = self
            .params
            .iter()
            .map(|p| if trainable { tape.leaf(p.clone()) } else { tape.constant(p.clone()) })
            .collect();
        BoundDiscriminator { disc: self, params }
    }

    /// Logits and rotation predictions for a batch, without gradients.
    pub fn evaluate(&self, x: &Tensor) -> Result<(Vec<f64>, Option<Tensor>)> {
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape, false);
        let xv = tape.constant(x.clone());
        let out = bound.forward(&mut tape, xv, false)?;
        Ok((tape.value(out.logit).data().to_vec(), out.pose.map(|p| tape.value(p).clone())))
    }
}

pub struct BoundDiscriminator<'a> {
    disc: &'a Discriminator,
    params: Vec<Var>,
}

pub struct DiscriminatorOutput {
    /// `[B, 1]`.
    pub logit: Var,
    /// `[B, 6]` when the network has a rotation head.
    pub pose: Option<Var>,
    /// `∂(Σ_b logit_b)/∂x`, recorded on the tape so it can itself be differentiated.
    pub input_grad: Option<Var>,
}

impl BoundDiscriminator<'_> {
    pub fn param_vars(&self) -> &[Var] {
        &self.params
    }

    pub fn forward(&self, tape: &mut Tape, x: Var, input_grad: bool) -> Result<DiscriminatorOutput> {
        let d = self.disc;
        let shape = tape.shape(x).to_vec();
        if shape.len() != 4 || shape[1] != d.in_channels || shape[2] != d.resolution || shape[3] != d.resolution {
            return Err(Error::invalid(format!(
                "discriminator expects [B, {}, {r}, {r}] input, got {shape:?}",
                d.in_channels,
                r = d.resolution
            )));
        }
        let batch = shape[0];
        if batch == 0 {
            return Err(Error::invalid("discriminator batch is empty"));
        }
        let mut h = x;
        let mut inputs = Vec::with_capacity(d.layers);
        let mut slopes = Vec::with_capacity(d.layers);
        for l in 0..d.layers {
            let (w, b) = (self.params[2 * l], self.params[2 * l + 1]);
            inputs.push(tape.shape(h)[2]);
            let conv = tape.conv2d(h, w, STRIDE, PAD)?;
            let pre = tape.add(conv, b)?;
            slopes.push(tape.value(pre).map(|v| if v > 0.0 { 1.0 } else { d.slope }));
            h = tape.leaky_relu(pre, d.slope)?;
        }
        let last_shape = tape.shape(h).to_vec();
        let features = last_shape[1..].iter().product::<usize>();
        let flat = tape.reshape(h, &[batch, features])?;
        let head = 2 * d.layers;
        let logit = tape.matmul(flat, self.params[head])?;
        let logit = tape.add(logit, self.params[head + 1])?;
        let pose = if d.pose_head {
            let p = tape.matmul(flat, self.params[head + 2])?;
            Some(tape.add(p, self.params[head + 3])?)
        } else {
            None
        };

        let input_grad = if input_grad {
            let wt = tape.transpose(self.params[head])?;
            let mut delta = tape.broadcast_to(wt, &[batch, features])?;
            delta = tape.reshape(delta, &last_shape)?;
            for l in (0..d.layers).rev() {
                delta = tape.mul_const(delta, slopes[l].clone())?;
                let side = inputs[l];
                delta = tape.conv2d_transpose(delta, self.params[2 * l], STRIDE, PAD, side, side)?;
            }
            Some(delta)
        } else {
            None
        };
        Ok(DiscriminatorOutput { logit, pose, input_grad })
    }
}
