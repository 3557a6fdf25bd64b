//! Logistic density and unbiased SDF-to-opacity compositing weights.

use objint_autodiff::{sigmoid, Tape, Tensor, Var};

use crate::error::{Error, Result};

/// Keeps `1 - α` away from zero before taking its logarithm.
const TRANSMITTANCE_FLOOR: f64 = 1e-300;
const CDF_FLOOR: f64 = 1e-12;

/// `φ_s(x) = s e^{-sx} / (1 + e^{-sx})²`, evaluated through `e^{-s|x|}` so it never overflows.
pub fn logistic_density(x: f64, s: f64) -> f64 {
    let e = (-s * x.abs()).exp();
    s * e / ((1.0 + e) * (1.0 + e))
}

/// `Φ_s(x) = 1 / (1 + e^{-sx})`.
pub fn logistic_cdf(x: f64, s: f64) -> f64 {
    sigmoid(s * x)
}

fn check_sorted(depths: &[f64]) -> Result<()> {
    if let Some(i) = depths.windows(2).position(|w| !(w[0] <= w[1])) {
        return Err(Error::invalid(format!(
            "sample depths must be sorted ascending (index {i}: {} then {})",
            depths[i],
            depths[i + 1]
        )));
    }
    Ok(())
}

/// Per-sample compositing weights along one ray.
///
/// Interval `i` between samples `i` and `i + 1` has opacity
/// `α_i = max((Φ(f_i) - Φ(f_{i+1})) / Φ(f_i), 0)`; its weight `T_i α_i` is assigned
/// to sample `i`, so the last sample always carries weight 0.
pub fn neus_weights(sdf: &[f64], depths: &[f64], s: f64) -> Result<Vec<f64>> {
    if sdf.len() != depths.len() || sdf.len() < 2 {
        return Err(Error::invalid(format!(
            "neus weights need matching sdf/depth lists of length >= 2 (got {} and {})",
            sdf.len(),
            depths.len()
        )));
    }
    check_sorted(depths)?;
    let phi: Vec<f64> = sdf.iter().map(|f| logistic_cdf(*f, s)).collect();
    let mut weights = vec![0.0; sdf.len()];
    let mut log_t = 0.0f64;
    for i in 0..sdf.len() - 1 {
        let alpha = ((phi[i] - phi[i + 1]) / (phi[i] + CDF_FLOOR)).max(0.0);
        weights[i] = log_t.exp() * alpha;
        log_t += (1.0 - alpha).max(TRANSMITTANCE_FLOOR).ln();
    }
    Ok(weights)
}

/// Batched [`neus_weights`] on a tape: `sdf` is `[R, N]`, `s` a `[1, 1]` scale.
pub fn neus_weights_tape(tape: &mut Tape, sdf: Var, s: Var) -> Result<Var> {
    let shape = tape.shape(sdf).to_vec();
    let (rays, n) = match shape[..] {
        [r, n] if n >= 2 => (r, n),
        _ => return Err(Error::invalid(format!("neus weights need [rays, samples >= 2], got {shape:?}"))),
    };
    let sf = tape.mul(sdf, s)?;
    let phi = tape.sigmoid(sf)?;
    let front = tape.slice(phi, 1, 0, n - 1)?;
    let back = tape.slice(phi, 1, 1, n)?;
    let drop = tape.sub(front, back)?;
    let denom = tape.add_scalar(front, CDF_FLOOR)?;
    let alpha = tape.div(drop, denom)?;
    let alpha = tape.max_const(alpha, 0.0)?;
    let keep = tape.neg(alpha)?;
    let keep = tape.add_scalar(keep, 1.0)?;
    let keep = tape.max_const(keep, TRANSMITTANCE_FLOOR)?;
    let log_keep = tape.log(keep)?;
    let m = n - 1;
    let upper = tape.constant(Tensor::from_fn(vec![m, m], |k| if k / m < k % m { 1.0 } else { 0.0 }));
    let log_t = tape.matmul(log_keep, upper)?;
    let t = tape.exp(log_t)?;
    let w = tape.mul(alpha, t)?;
    let pad = tape.constant(Tensor::zeros(vec![rays, 1]));
    Ok(tape.concat(&[w, pad], 1)?)
}
