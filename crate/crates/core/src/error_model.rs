//! Analytic predictors for quantization error in the presence of outliers,
//! and a Monte-Carlo validator for them.
//!
//! The predictors use an idealized range quantizer: values are clamped to
//! `[-c, c]` and rounded to a grid of step `delta = c / (2^b - 1)`. The input
//! `x` is a nonnegative scalar magnitude factor throughout.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use statrs::function::erf::erfc;

use crate::error::{BdqError, Result};
use crate::numerics::{rng_from_seed, sample_matrix, Matrix, OutlierProfile};
use crate::quantizer::{fake_quantize, QuantSpec};

/// Relative tolerance for Monte-Carlo agreement at 10^6 samples.
pub const MC_REL_TOLERANCE: f64 = 0.15;

fn max_code(bits: u32) -> Result<f64> {
    if !(2..=30).contains(&bits) {
        return Err(BdqError::Parameter(format!("bits must lie in [2, 30], got {bits}")));
    }
    Ok(((1u64 << bits) - 1) as f64)
}

/// `delta = c / (2^b - 1)` for the quantization range `[-c, c]`.
pub fn scale_from_range(c: f64, bits: u32) -> Result<f64> {
    if !(c > 0.0 && c.is_finite()) {
        return Err(BdqError::Parameter(format!("range bound must be > 0, got {c}")));
    }
    Ok(c / max_code(bits)?)
}

/// Step size forced by a single outlier: `|w_outlier| / (2^b - 1)`.
pub fn scale_from_outlier(w_outlier: f64, bits: u32) -> Result<f64> {
    if w_outlier == 0.0 || !w_outlier.is_finite() {
        return Err(BdqError::Parameter(format!("outlier must be nonzero and finite, got {w_outlier}")));
    }
    Ok(w_outlier.abs() / max_code(bits)?)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OutlierBound {
    /// `|w_outlier| x / (2^b - 1)`, i.e. `delta' x`.
    pub bound: f64,
    /// `delta' x / 2`, the rounding-error bound on the new grid.
    pub half_bound: f64,
}

/// Per-element error bound once an outlier sets the step size.
pub fn single_outlier_bound(w_outlier: f64, bits: u32, x: f64) -> Result<OutlierBound> {
    if !(x >= 0.0) {
        return Err(BdqError::Parameter(format!("input magnitude must be >= 0, got {x}")));
    }
    let bound = w_outlier.abs() * x / max_code(bits)?;
    Ok(OutlierBound {
        bound,
        half_bound: bound / 2.0,
    })
}

/// Rounding-noise variance of normal entries on a grid set by a `k sigma`
/// outlier: `k^2 sigma^2 / (12 (2^b - 1)^2)`.
pub fn normal_term_variance(k: f64, sigma: f64, bits: u32) -> Result<f64> {
    if !(k > 0.0 && sigma > 0.0) {
        return Err(BdqError::Parameter(format!("k and sigma must be > 0, got {k}, {sigma}")));
    }
    let m = max_code(bits)?;
    Ok(k * k * sigma * sigma / (12.0 * m * m))
}

/// Squared truncation error of a value clamped to `(2^b - 1) delta'`.
/// Zero inside the range; symmetric in the sign of `w_outlier`.
pub fn outlier_clip_error(w_outlier: f64, delta: f64, bits: u32) -> Result<f64> {
    if !(delta > 0.0) {
        return Err(BdqError::Parameter(format!("step must be > 0, got {delta}")));
    }
    let boundary = max_code(bits)? * delta;
    let excess = w_outlier.abs() - boundary;
    Ok(if excess > 0.0 { excess * excess } else { 0.0 })
}

/// `E[(|w| - t)_+^2]` for `w ~ N(0, s^2)`:
/// `2 s^2 [(1 + u^2) Q(u) - u phi(u)]` with `u = t / s`.
pub fn expected_clip_error(s: f64, threshold: f64) -> f64 {
    let u = threshold / s;
    let tail = 0.5 * erfc(u / std::f64::consts::SQRT_2);
    let pdf = (-0.5 * u * u).exp() / (2.0 * std::f64::consts::PI).sqrt();
    (2.0 * s * s * ((1.0 + u * u) * tail - u * pdf)).max(0.0)
}

/// Predicted and (optionally) measured error components.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ErrorReport {
    pub empirical_mse: Option<f64>,
    pub predicted_normal: f64,
    pub predicted_outlier: f64,
    pub outlier_frac: f64,
    pub total_predicted: f64,
    /// `p * predicted_outlier * x / total_predicted`.
    pub dominance_ratio: f64,
    pub samples: Option<usize>,
    pub mc_tolerance: Option<f64>,
}

/// Mixes normal and outlier terms: `x ((1 - p) normal + p outlier)`.
pub fn combine_terms(p: f64, normal: f64, outlier: f64, x: f64) -> Result<ErrorReport> {
    if !(0.0..=1.0).contains(&p) {
        return Err(BdqError::Parameter(format!("p must lie in [0, 1], got {p}")));
    }
    if !(x >= 0.0) || normal < 0.0 || outlier < 0.0 {
        return Err(BdqError::Parameter("error terms and x must be >= 0".into()));
    }
    let total = x * ((1.0 - p) * normal + p * outlier);
    let dominance_ratio = if total > 0.0 { x * p * outlier / total } else { 0.0 };
    Ok(ErrorReport {
        empirical_mse: None,
        predicted_normal: normal,
        predicted_outlier: outlier,
        outlier_frac: p,
        total_predicted: total,
        dominance_ratio,
        samples: None,
        mc_tolerance: None,
    })
}

/// Predicted total error for the mixture described by `profile` quantized on
/// a grid of step `delta` clamped at `(2^b - 1) delta`.
///
/// The normal term is the rounding variance `delta^2 / 12` (equal to
/// [`normal_term_variance`] when `delta = k sigma / (2^b - 1)`); the outlier
/// term is the clip error averaged over `N(0, (k sigma)^2)`.
pub fn total_error_decomposition(
    profile: &OutlierProfile,
    bits: u32,
    x: f64,
    delta: f64,
) -> Result<ErrorReport> {
    profile.validate()?;
    if !(delta > 0.0) {
        return Err(BdqError::Parameter(format!("step must be > 0, got {delta}")));
    }
    let boundary = max_code(bits)? * delta;
    let normal = delta * delta / 12.0;
    let outlier = expected_clip_error(profile.k * profile.sigma, boundary);
    combine_terms(profile.outlier_frac, normal, outlier, x)
}

/// `E[eps^2] ~= p w_outlier^2 x` when clipping dominates.
pub fn dominance_approx(p: f64, w_outlier: f64, x: f64) -> f64 {
    p * w_outlier * w_outlier * x
}

/// The idealized quantizer behind the predictors: clamp to `[-c, c]` with
/// `c = (2^b - 1) delta`, then round to the nearest multiple of `delta`.
pub fn range_quantize(v: f64, delta: f64, bits: u32) -> f64 {
    let m = ((1u64 << bits) - 1) as f64;
    (v / delta).round().clamp(-m, m) * delta
}

/// Monte-Carlo estimate of the range-quantizer MSE under the outlier mixture,
/// attached to the analytic decomposition for the same parameters.
pub fn monte_carlo_decomposition(
    profile: &OutlierProfile,
    bits: u32,
    x: f64,
    delta: f64,
    samples: usize,
) -> Result<ErrorReport> {
    let mut report = total_error_decomposition(profile, bits, x, delta)?;
    let data = sample_matrix(profile, 1, samples)?;
    let mse = data
        .as_slice()
        .iter()
        .map(|&v| (v - range_quantize(v, delta, bits)).powi(2))
        .sum::<f64>()
        / samples as f64;
    report.empirical_mse = Some(mse * x);
    report.samples = Some(samples);
    report.mc_tolerance = Some(MC_REL_TOLERANCE);
    Ok(report)
}

/// Measured MSE of a real `b`-bit quantizer on the outlier mixture.
pub fn quantizer_mse(profile: &OutlierProfile, spec: &QuantSpec, samples: usize) -> Result<f64> {
    let data = sample_matrix(profile, 1, samples)?;
    let dq = fake_quantize(&data, spec)?;
    Ok(data.sub(&dq)?.mean_square())
}

/// `MSE / (delta^2 / 12)` for outlier-free `N(0, 1)` data on the range grid
/// with `c = max |sample|`. Close to 1 when rounding noise is uniform.
pub fn uniform_noise_ratio(bits: u32, samples: usize, seed: u64) -> Result<f64> {
    let mut rng = rng_from_seed(seed);
    let data: Vec<f64> = (0..samples).map(|_| rng.sample(StandardNormal)).collect();
    let c = data.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let delta = scale_from_range(c, bits)?;
    let mse = data
        .iter()
        .map(|&v| (v - range_quantize(v, delta, bits)).powi(2))
        .sum::<f64>()
        / samples as f64;
    Ok(mse / (delta * delta / 12.0))
}

/// Same ratio measured with a real quantizer spec against its own step.
pub fn quantizer_noise_ratio(spec: &QuantSpec, samples: usize, seed: u64) -> Result<f64> {
    let mut rng = rng_from_seed(seed);
    let data: Vec<f64> = (0..samples).map(|_| rng.sample(StandardNormal)).collect();
    let m = Matrix::row_vector(&data)?;
    let q = crate::quantizer::quantize(&m, spec)?;
    let mse = m.sub(&crate::quantizer::dequantize(&q))?.mean_square();
    let delta = q.scales[0];
    Ok(mse / (delta * delta / 12.0))
}
