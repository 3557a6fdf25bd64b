//! Masked image-quality and intrinsic-map metrics.
//!
//! Masks are binarized at 0.5. Every metric multiplies its inputs by the mask
//! before looking at them, so pixels outside the mask never matter.

use objint_autodiff::{Tape, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::raster::Raster;

pub const PSNR_CAP: f64 = 99.0;
const MSE_FLOOR: f64 = 1e-10;
pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_C1: f64 = 0.01 * 0.01;
pub const SSIM_C2: f64 = 0.03 * 0.03;

fn binary(mask: &Raster) -> Vec<bool> {
    mask.data().iter().map(|&m| m > 0.5).collect()
}

fn check_pair(a: &Raster, b: &Raster, mask: &Raster) -> Result<Vec<bool>> {
    a.same_shape(b)?;
    if mask.channels() != 1 || mask.height() != a.height() || mask.width() != a.width() {
        return Err(Error::invalid(format!("mask {:?} does not cover image {:?}", mask.dims(), a.dims())));
    }
    let on = binary(mask);
    if !on.contains(&true) {
        return Err(Error::invalid("metric mask is empty"));
    }
    Ok(on)
}

fn masked(r: &Raster, on: &[bool]) -> Raster {
    let plane = on.len();
    let mut out = r.clone();
    for (i, v) in out.data_mut().iter_mut().enumerate() {
        if !on[i % plane] {
            *v = 0.0;
        }
    }
    out
}

fn mse_to_psnr(mse: f64) -> f64 {
    if mse < MSE_FLOOR {
        PSNR_CAP
    } else {
        (10.0 * (1.0 / mse).log10()).min(PSNR_CAP)
    }
}

/// `10 log10(1 / MSE)` over masked pixels and all channels, capped at [`PSNR_CAP`].
pub fn psnr(a: &Raster, b: &Raster, mask: &Raster) -> Result<f64> {
    let on = check_pair(a, b, mask)?;
    let plane = on.len();
    let (mut acc, mut n) = (0.0, 0usize);
    for (i, (x, y)) in a.data().iter().zip(b.data()).enumerate() {
        if on[i % plane] {
            acc += (x - y) * (x - y);
            n += 1;
        }
    }
    Ok(mse_to_psnr(acc / n as f64))
}

/// Normalized 1-D Gaussian taps of the SSIM window.
pub fn gaussian_taps() -> [f64; SSIM_WINDOW] {
    let half = (SSIM_WINDOW / 2) as f64;
    let mut w: [f64; SSIM_WINDOW] = std::array::from_fn(|i| {
        let d = i as f64 - half;
        (-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp()
    });
    let s: f64 = w.iter().sum();
    w.iter_mut().for_each(|v| *v /= s);
    w
}

/// Separable Gaussian filter of one plane, zero outside the image.
fn blur(plane: &[f64], h: usize, w: usize, taps: &[f64; SSIM_WINDOW]) -> Vec<f64> {
    let r = SSIM_WINDOW as isize / 2;
    let mut rows = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for (k, t) in taps.iter().enumerate() {
                let xx = x as isize + k as isize - r;
                if xx >= 0 && (xx as usize) < w {
                    acc += t * plane[y * w + xx as usize];
                }
            }
            rows[y * w + x] = acc;
        }
    }
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for (k, t) in taps.iter().enumerate() {
                let yy = y as isize + k as isize - r;
                if yy >= 0 && (yy as usize) < h {
                    acc += t * rows[yy as usize * w + x];
                }
            }
            out[y * w + x] = acc;
        }
    }
    out
}

fn ssim_index(mu_a: f64, mu_b: f64, var_a: f64, var_b: f64, cov: f64) -> f64 {
    ((2.0 * mu_a * mu_b + SSIM_C1) * (2.0 * cov + SSIM_C2))
        / ((mu_a * mu_a + mu_b * mu_b + SSIM_C1) * (var_a + var_b + SSIM_C2))
}

/// Mean SSIM over windows centered on masked pixels, all channels.
///
/// Both images are zeroed outside the mask and outside the frame before the
/// 11x11 Gaussian (sigma 1.5) statistics are taken.
pub fn ssim(a: &Raster, b: &Raster, mask: &Raster) -> Result<f64> {
    let on = check_pair(a, b, mask)?;
    let (am, bm) = (masked(a, &on), masked(b, &on));
    let (c, h, w) = a.dims();
    let taps = gaussian_taps();
    let (mut acc, mut n) = (0.0, 0usize);
    for ch in 0..c {
        let (pa, pb) = (am.plane(ch), bm.plane(ch));
        let sq = |p: &[f64], q: &[f64]| p.iter().zip(q).map(|(x, y)| x * y).collect::<Vec<_>>();
        let mu_a = blur(pa, h, w, &taps);
        let mu_b = blur(pb, h, w, &taps);
        let e_aa = blur(&sq(pa, pa), h, w, &taps);
        let e_bb = blur(&sq(pb, pb), h, w, &taps);
        let e_ab = blur(&sq(pa, pb), h, w, &taps);
        for i in (0..h * w).filter(|&i| on[i]) {
            let (ma, mb) = (mu_a[i], mu_b[i]);
            acc += ssim_index(ma, mb, e_aa[i] - ma * ma, e_bb[i] - mb * mb, e_ab[i] - ma * mb);
            n += 1;
        }
    }
    Ok(acc / n as f64)
}

/// Scale-invariant MSE of log depth: `mean(d^2) - mean(d)^2`, `d = ln pred - ln gt`.
pub fn si_depth_mse(pred: &Raster, gt: &Raster, mask: &Raster) -> Result<f64> {
    let on = check_pair(pred, gt, mask)?;
    if pred.channels() != 1 {
        return Err(Error::invalid("depth maps have one channel"));
    }
    let mut d = Vec::new();
    for (i, (&p, &g)) in pred.data().iter().zip(gt.data()).enumerate() {
        if !on[i] {
            continue;
        }
        if !(p > 0.0 && g > 0.0) {
            return Err(Error::invalid(format!("non-positive depth under the mask (pred {p}, gt {g})")));
        }
        d.push((p / g).ln());
    }
    // Same value as mean(d^2) - mean(d)^2, computed on residuals shifted by the
    // first one so a constant log ratio gives exactly zero.
    let n = d.len() as f64;
    let shifted: Vec<f64> = d.iter().map(|v| v - d[0]).collect();
    let mean = shifted.iter().sum::<f64>() / n;
    Ok(shifted.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n)
}

/// Mean angle in degrees between unit normal maps over the mask.
pub fn normal_angle_error(pred: &Raster, gt: &Raster, mask: &Raster) -> Result<f64> {
    let on = check_pair(pred, gt, mask)?;
    if pred.channels() != 3 {
        return Err(Error::invalid("normal maps have three channels"));
    }
    let plane = on.len();
    let (pd, gd) = (pred.data(), gt.data());
    let (mut acc, mut n) = (0.0, 0usize);
    for i in (0..plane).filter(|&i| on[i]) {
        let dot: f64 = (0..3).map(|c| pd[c * plane + i] * gd[c * plane + i]).sum();
        acc += dot.clamp(-1.0, 1.0).acos().to_degrees();
        n += 1;
    }
    Ok(acc / n as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AlbedoMetrics {
    pub psnr: f64,
    pub ssim: f64,
    /// Per-channel least-squares scale applied to the prediction.
    pub scales: [f64; 3],
}

/// Least-squares scale `Σ pred·gt / Σ pred²` of one channel over the mask.
pub fn fit_channel_scale(pred: &[f64], gt: &[f64], on: &[bool]) -> Option<f64> {
    let (mut num, mut den) = (0.0, 0.0);
    for i in (0..on.len()).filter(|&i| on[i]) {
        num += pred[i] * gt[i];
        den += pred[i] * pred[i];
    }
    (den > 0.0).then(|| num / den)
}

/// PSNR and SSIM after fitting one scale per channel and clamping to `[0, 1]`.
pub fn si_albedo_metrics(pred: &Raster, gt: &Raster, mask: &Raster) -> Result<AlbedoMetrics> {
    let on = check_pair(pred, gt, mask)?;
    if pred.channels() != 3 {
        return Err(Error::invalid("albedo maps have three channels"));
    }
    let mut scales = [0.0; 3];
    for (c, s) in scales.iter_mut().enumerate() {
        *s = fit_channel_scale(pred.plane(c), gt.plane(c), &on)
            .ok_or_else(|| Error::invalid("albedo prediction is zero under the mask"))?;
    }
    let plane = on.len();
    let mut fitted = pred.clone();
    for (i, v) in fitted.data_mut().iter_mut().enumerate() {
        *v = (*v * scales[i / plane]).clamp(0.0, 1.0);
    }
    Ok(AlbedoMetrics { psnr: psnr(&fitted, gt, mask)?, ssim: ssim(&fitted, gt, mask)?, scales })
}

fn proxy_term(a: &Raster, b: &Raster, on: &[bool]) -> f64 {
    let plane = on.len();
    let (mut l1, mut n) = (0.0, 0usize);
    for (i, (x, y)) in a.data().iter().zip(b.data()).enumerate() {
        if on[i % plane] {
            l1 += (x - y).abs();
            n += 1;
        }
    }
    let mask = Raster::new(1, a.height(), a.width(), on.iter().map(|&o| f64::from(o)).collect())
        .expect("mask matches image");
    let s = ssim(a, b, &mask).expect("mask is nonempty");
    0.5 * l1 / n as f64 + 0.5 * (1.0 - s)
}

/// Masked images and mask after a 2x box downsample, or `None` when nothing survives.
fn half_scale(a: &Raster, b: &Raster, on: &[bool]) -> Option<(Raster, Raster, Vec<bool>)> {
    let m = Raster::new(1, a.height(), a.width(), on.iter().map(|&o| f64::from(o)).collect()).ok()?;
    let on_half = binary(&m.downsample(2));
    on_half.contains(&true).then(|| (masked(a, on).downsample(2), masked(b, on).downsample(2), on_half))
}

/// Perceptual stand-in: `0.5 · masked L1 + 0.5 · (1 - SSIM)`, averaged over full
/// resolution and a 2x box downsample (the latter dropped when its mask is empty).
pub fn recon_proxy_error(a: &Raster, b: &Raster, mask: &Raster) -> Result<f64> {
    let on = check_pair(a, b, mask)?;
    let full = proxy_term(&masked(a, &on), &masked(b, &on), &on);
    Ok(match half_scale(a, b, &on) {
        Some((ah, bh, oh)) => 0.5 * (full + proxy_term(&ah, &bh, &oh)),
        None => full,
    })
}

fn planes_tensor(r: &Raster) -> Tensor {
    let (c, h, w) = r.dims();
    Tensor::new(vec![c, 1, h, w], r.data().to_vec()).expect("raster size")
}

fn mask_tensor(on: &[bool], h: usize, w: usize) -> Tensor {
    Tensor::new(vec![1, 1, h, w], on.iter().map(|&o| f64::from(o)).collect()).expect("mask size")
}

/// One scale of the proxy on a tape; `a` and `b` are `[C, 1, H, W]`, already masked.
fn proxy_term_tape(tape: &mut Tape, a: Var, b: Var, on: &[bool], c: usize, h: usize, w: usize) -> Result<Var> {
    let taps = gaussian_taps();
    let kernel = Tensor::from_fn(vec![1, 1, SSIM_WINDOW, SSIM_WINDOW], |i| {
        let (y, x) = (i / SSIM_WINDOW, i % SSIM_WINDOW);
        taps[y] * taps[x]
    });
    let k = tape.constant(kernel);
    let pad = SSIM_WINDOW / 2;
    let count = (on.iter().filter(|&&o| o).count() * c) as f64;
    let select = tape.constant(mask_tensor(on, h, w).map(|v| v / count));

    let diff = tape.sub(a, b)?;
    let neg = tape.neg(diff)?;
    let abs = tape.maximum(diff, neg)?;
    let l1 = tape.mul(abs, select)?;
    let l1 = tape.sum(l1)?;

    let mu_a = tape.conv2d(a, k, 1, pad)?;
    let mu_b = tape.conv2d(b, k, 1, pad)?;
    let aa = tape.mul(a, a)?;
    let bb = tape.mul(b, b)?;
    let ab = tape.mul(a, b)?;
    let e_aa = tape.conv2d(aa, k, 1, pad)?;
    let e_bb = tape.conv2d(bb, k, 1, pad)?;
    let e_ab = tape.conv2d(ab, k, 1, pad)?;
    let ma2 = tape.mul(mu_a, mu_a)?;
    let mb2 = tape.mul(mu_b, mu_b)?;
    let mab = tape.mul(mu_a, mu_b)?;
    let var_a = tape.sub(e_aa, ma2)?;
    let var_b = tape.sub(e_bb, mb2)?;
    let cov = tape.sub(e_ab, mab)?;
    let n1 = tape.scale(mab, 2.0)?;
    let n1 = tape.add_scalar(n1, SSIM_C1)?;
    let n2 = tape.scale(cov, 2.0)?;
    let n2 = tape.add_scalar(n2, SSIM_C2)?;
    let d1 = tape.add(ma2, mb2)?;
    let d1 = tape.add_scalar(d1, SSIM_C1)?;
    let d2 = tape.add(var_a, var_b)?;
    let d2 = tape.add_scalar(d2, SSIM_C2)?;
    let num = tape.mul(n1, n2)?;
    let den = tape.mul(d1, d2)?;
    let map = tape.div(num, den)?;
    let s = tape.mul(map, select)?;
    let s = tape.sum(s)?;

    let half_l1 = tape.scale(l1, 0.5)?;
    let half_s = tape.scale(s, -0.5)?;
    let t = tape.add(half_l1, half_s)?;
    Ok(tape.add_scalar(t, 0.5)?)
}

/// [`recon_proxy_error`] and its gradient with respect to `a`.
pub fn recon_proxy_grad(a: &Raster, b: &Raster, mask: &Raster) -> Result<(f64, Raster)> {
    let on = check_pair(a, b, mask)?;
    let (c, h, w) = a.dims();
    let mut tape = Tape::new();
    let av = tape.leaf(planes_tensor(a));
    let bv = tape.constant(planes_tensor(&masked(b, &on)));
    let m = tape.constant(mask_tensor(&on, h, w));
    let am = tape.mul(av, m)?;
    let full = proxy_term_tape(&mut tape, am, bv, &on, c, h, w)?;
    let total = match half_scale(a, b, &on) {
        Some((_, _, on_half)) => {
            let box2 = tape.constant(Tensor::full(vec![1, 1, 2, 2], 0.25));
            let ah = tape.conv2d(am, box2, 2, 0)?;
            let bh = tape.conv2d(bv, box2, 2, 0)?;
            let (hh, wh) = (h / 2, w / 2);
            let mh = tape.constant(mask_tensor(&on_half, hh, wh));
            let ah = tape.mul(ah, mh)?;
            let bh = tape.mul(bh, mh)?;
            let half = proxy_term_tape(&mut tape, ah, bh, &on_half, c, hh, wh)?;
            let sum = tape.add(full, half)?;
            tape.scale(sum, 0.5)?
        }
        None => full,
    };
    let value = tape.value(total).item()?;
    let grad = tape.backward(total)?.wrt(av);
    Ok((value, Raster::new(c, h, w, grad.into_data())?))
}
