//! Depth sampling along rays: stratified coarse samples and inverse-CDF refinement.

use rand::Rng;

use crate::error::{Error, Result};

/// Added to every coarse weight before building the refinement distribution.
pub const WEIGHT_EPS: f64 = 1e-5;

/// Entry and exit distances of a unit-speed ray `o + t d` through a sphere at
/// the origin; `None` when it misses or lies entirely behind the origin.
pub fn ray_sphere(o: [f64; 3], d: [f64; 3], radius: f64) -> Option<(f64, f64)> {
    let b = o[0] * d[0] + o[1] * d[1] + o[2] * d[2];
    let c = o[0] * o[0] + o[1] * o[1] + o[2] * o[2] - radius * radius;
    let disc = b * b - c;
    if disc <= 0.0 {
        return None;
    }
    let root = disc.sqrt();
    let (near, far) = (-b - root, -b + root);
    (far > 0.0).then(|| (near.max(0.0), far))
}

/// `n` depths, one per equal stratum of `[near, far]`: uniformly jittered when an
/// rng is given, at stratum midpoints otherwise.
pub fn stratified<R: Rng + ?Sized>(near: f64, far: f64, n: usize, rng: Option<&mut R>) -> Vec<f64> {
    let step = (far - near) / n as f64;
    match rng {
        Some(rng) => (0..n).map(|i| near + (i as f64 + rng.gen::<f64>()) * step).collect(),
        None => (0..n).map(|i| near + (i as f64 + 0.5) * step).collect(),
    }
}

/// Draws `n` depths by inverse-CDF sampling of the piecewise-constant density
/// over the coarse intervals `[t_i, t_{i+1}]` with mass `w_i + ε`.
///
/// When every weight is zero the masses fall back to the interval widths, i.e.
/// uniform over `[t_0, t_{N-1}]`. Quantiles are stratified (jittered with an rng,
/// midpoints otherwise).
pub fn importance_resample<R: Rng + ?Sized>(
    weights: &[f64],
    depths: &[f64],
    n: usize,
    rng: Option<&mut R>,
) -> Result<Vec<f64>> {
    if weights.len() != depths.len() || depths.len() < 2 {
        return Err(Error::invalid("importance sampling needs matching weight/depth lists of length >= 2"));
    }
    if weights.iter().any(|w| !w.is_finite()) {
        return Err(Error::invalid("importance sampling weights must be finite"));
    }
    let bins = depths.len() - 1;
    let all_zero = weights.iter().all(|w| *w == 0.0);
    let mass: Vec<f64> = (0..bins)
        .map(|i| if all_zero { depths[i + 1] - depths[i] } else { weights[i].max(0.0) + WEIGHT_EPS })
        .collect();
    let total: f64 = mass.iter().sum();
    let mut cdf = Vec::with_capacity(bins + 1);
    cdf.push(0.0);
    let mut acc = 0.0;
    for m in &mass {
        acc += m / total;
        cdf.push(acc);
    }
    let quantiles = stratified(0.0, 1.0, n, rng);
    Ok(quantiles
        .into_iter()
        .map(|u| {
            let u = u * cdf[bins];
            let i = cdf.partition_point(|c| *c <= u).clamp(1, bins) - 1;
            let span = cdf[i + 1] - cdf[i];
            let frac = if span > 0.0 { ((u - cdf[i]) / span).clamp(0.0, 1.0) } else { 0.5 };
            depths[i] + frac * (depths[i + 1] - depths[i])
        })
        .collect())
}

/// Sorted union of two depth lists, nudging ties upward so the result is
/// strictly increasing.
pub fn merge_depths(coarse: &[f64], refined: &[f64]) -> Vec<f64> {
    let mut all: Vec<f64> = coarse.iter().chain(refined).copied().collect();
    all.sort_by(f64::total_cmp);
    for i in 1..all.len() {
        if all[i] <= all[i - 1] {
            all[i] = all[i - 1].next_up();
        }
    }
    all
}
