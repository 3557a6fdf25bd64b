//! Critics, crop augmentation, rotation regression and the adversarial objective.

pub mod augment;
pub mod discriminator;

use nalgebra::{Matrix3, Vector3};
use objint_autodiff::{Tape, Tensor, Var};

pub use augment::{augment, AugmentParams, AugmentTransform};
pub use discriminator::{BoundDiscriminator, Discriminator, DiscriminatorConfig, DiscriminatorOutput, POSE_DIM};

use crate::error::{Error, Result};

/// First two columns of `r`, concatenated.
pub fn gram_schmidt_embed(r: &Matrix3<f64>) -> [f64; 6] {
    [r[(0, 0)], r[(1, 0)], r[(2, 0)], r[(0, 1)], r[(1, 1)], r[(2, 1)]]
}

/// Rotation recovered from a 6-vector by orthonormalizing its two columns.
pub fn gram_schmidt_reconstruct(v: &[f64; 6]) -> Result<Matrix3<f64>> {
    let a = Vector3::new(v[0], v[1], v[2]);
    let b = Vector3::new(v[3], v[4], v[5]);
    let e1 = a.try_normalize(1e-12).ok_or_else(|| Error::invalid("first embedding column is zero"))?;
    let e2 = (b - e1 * e1.dot(&b))
        .try_normalize(1e-12)
        .ok_or_else(|| Error::invalid("embedding columns are parallel"))?;
    Ok(Matrix3::from_columns(&[e1, e2, e1.cross(&e2)]))
}

/// `‖predicted - embed(true)‖²` for one sample.
pub fn pose_loss(predicted: &[f64; 6], true_rot: &Matrix3<f64>) -> f64 {
    let e = gram_schmidt_embed(true_rot);
    predicted.iter().zip(e).map(|(p, t)| (p - t) * (p - t)).sum()
}

/// Batch mean of [`pose_loss`] on a tape; `predicted` is `[B, 6]`.
pub fn pose_loss_tape(tape: &mut Tape, predicted: Var, true_rots: &[Matrix3<f64>]) -> Result<Var> {
    let shape = tape.shape(predicted).to_vec();
    if shape != [true_rots.len(), POSE_DIM] || true_rots.is_empty() {
        return Err(Error::invalid(format!("pose predictions {shape:?} do not match {} rotations", true_rots.len())));
    }
    let target: Vec<f64> = true_rots.iter().flat_map(gram_schmidt_embed).collect();
    let target = tape.constant(Tensor::new(shape, target)?);
    let d = tape.sub(predicted, target)?;
    let d = tape.square(d)?;
    let s = tape.sum(d)?;
    Ok(tape.scale(s, 1.0 / true_rots.len() as f64)?)
}

/// A realness score whose input gradient can be recorded on the tape.
pub trait Critic {
    /// Logits `[B, 1]` and, when requested, `∂(Σ logits)/∂x` as a differentiable expression.
    fn critic(&self, tape: &mut Tape, x: Var, input_grad: bool) -> Result<(Var, Option<Var>)>;
}

impl Critic for BoundDiscriminator<'_> {
    fn critic(&self, tape: &mut Tape, x: Var, input_grad: bool) -> Result<(Var, Option<Var>)> {
        let out = self.forward(tape, x, input_grad)?;
        Ok((out.logit, out.input_grad))
    }
}

fn nonempty(tape: &Tape, v: Var, what: &str) -> Result<()> {
    if tape.value(v).numel() == 0 {
        return Err(Error::invalid(format!("{what} batch is empty")));
    }
    Ok(())
}

/// `E[softplus(D(fake))] + E[softplus(-D(real))]`.
pub fn discriminator_loss(tape: &mut Tape, real_logits: Var, fake_logits: Var) -> Result<Var> {
    nonempty(tape, real_logits, "real")?;
    nonempty(tape, fake_logits, "fake")?;
    let f = tape.softplus(fake_logits)?;
    let f = tape.mean(f)?;
    let r = tape.neg(real_logits)?;
    let r = tape.softplus(r)?;
    let r = tape.mean(r)?;
    Ok(tape.add(f, r)?)
}

/// `E[softplus(-D(fake))]`.
pub fn generator_loss(tape: &mut Tape, fake_logits: Var) -> Result<Var> {
    nonempty(tape, fake_logits, "fake")?;
    let n = tape.neg(fake_logits)?;
    let s = tape.softplus(n)?;
    Ok(tape.mean(s)?)
}

/// Batch mean of `‖∇_x D(x)‖²` from the per-sample input gradient `[B, ...]`.
pub fn r1_penalty(tape: &mut Tape, input_grad: Var) -> Result<Var> {
    nonempty(tape, input_grad, "real")?;
    let batch = tape.shape(input_grad)[0];
    let sq = tape.square(input_grad)?;
    let s = tape.sum(sq)?;
    Ok(tape.scale(s, 1.0 / batch as f64)?)
}

/// The three adversarial terms, recorded on one tape.
#[derive(Clone, Copy, Debug)]
pub struct AdversarialLosses {
    pub generator: Var,
    pub discriminator: Var,
    /// Unweighted; multiply by the penalty weight when forming the critic objective.
    pub r1: Var,
}

pub fn adversarial_losses<C: Critic>(tape: &mut Tape, critic: &C, real: Var, fake: Var) -> Result<AdversarialLosses> {
    nonempty(tape, real, "real")?;
    nonempty(tape, fake, "fake")?;
    let (real_logits, grad) = critic.critic(tape, real, true)?;
    let (fake_logits, _) = critic.critic(tape, fake, false)?;
    let grad = grad.ok_or_else(|| Error::invalid("critic did not return an input gradient"))?;
    Ok(AdversarialLosses {
        generator: generator_loss(tape, fake_logits)?,
        discriminator: discriminator_loss(tape, real_logits, fake_logits)?,
        r1: r1_penalty(tape, grad)?,
    })
}
