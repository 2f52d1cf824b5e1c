//! Pipeline comparison, seed sweeps, the end-to-end calibration experiment
//! and the validation suites behind the command-line tool.

use std::fmt;
use std::io::Write;
use std::str::FromStr;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::calibration::{
    calibrate, cross_entropy, entropy, loss_and_gradient, rce_gradient, rce_loss, CalibrationConfig,
    CalibrationData, LossKind, ToyNetwork,
};
use crate::error::{BdqError, Result};
use crate::error_model::{
    monte_carlo_decomposition, scale_from_range, uniform_noise_ratio, MC_REL_TOLERANCE,
};
use crate::flatness::{
    optimize_flatness, raw_flatness, stationarity_residual, BiDiagonalTransform, DEFAULT_MAX_ITERS, DEFAULT_TOL,
};
use crate::numerics::{gaussian_matrix, rng_from_seed, sample_matrix, Matrix, OutlierProfile};
use crate::oracle::{central_difference, grid_search_flatness};
use crate::quantizer::{bin_occupancy, quantize, Granularity, QuantMode, QuantSpec};
use crate::transforms::{
    budget_comparison, apply_pair_forward, cayley, kronecker_apply, outlier_suppression_diagonal,
    quantize_weight, random_rotation, random_skew, rank_preservation_check, KronFitConfig, KroneckerTransform,
    RankTransform, RotationMeta, Side, TransformPair,
};

/// Environment variable capping the worker count of seed sweeps.
pub const THREADS_ENV: &str = "BDQ_THREADS";

/// Runs `f` on a pool sized by [`THREADS_ENV`] when set, else rayon's default.
pub fn with_pool<T: Send>(f: impl FnOnce() -> T + Send) -> T {
    match std::env::var(THREADS_ENV).ok().and_then(|v| v.parse::<usize>().ok()) {
        Some(n) if n > 0 => match rayon::ThreadPoolBuilder::new().num_threads(n).build() {
            Ok(pool) => pool.install(f),
            Err(_) => f(),
        },
        _ => f(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PipelineId {
    /// Identity pair.
    None,
    /// Seeded Hadamard-Cayley rotation.
    Rot,
    /// Flatness-optimal diagonal pair.
    Diag,
    /// Flatness-optimal diagonals followed by the rotation.
    Bdq,
    /// Orthogonal `P1 ⊗ P2` with `r^2 + s^2` parameters.
    Kron,
}

impl PipelineId {
    pub const ALL: [PipelineId; 5] = [
        PipelineId::None,
        PipelineId::Rot,
        PipelineId::Diag,
        PipelineId::Bdq,
        PipelineId::Kron,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            PipelineId::None => "none",
            PipelineId::Rot => "rot",
            PipelineId::Diag => "diag",
            PipelineId::Bdq => "bdq",
            PipelineId::Kron => "kron",
        }
    }
}

impl fmt::Display for PipelineId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for PipelineId {
    type Err = BdqError;

    fn from_str(s: &str) -> Result<Self> {
        PipelineId::ALL
            .into_iter()
            .find(|p| p.as_str() == s)
            .ok_or_else(|| BdqError::Parameter(format!("unknown pipeline '{s}' (expected none, rot, diag, bdq, kron)")))
    }
}

/// Parses a comma-separated pipeline list, rejecting duplicates.
pub fn parse_pipelines(s: &str) -> Result<Vec<PipelineId>> {
    let mut out = Vec::new();
    for part in s.split(',').map(str::trim).filter(|p| !p.is_empty()) {
        let id: PipelineId = part.parse()?;
        if out.contains(&id) {
            return Err(BdqError::Parameter(format!("pipeline '{id}' listed twice")));
        }
        out.push(id);
    }
    if out.is_empty() {
        return Err(BdqError::Parameter("no pipelines requested".into()));
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompareConfig {
    pub pipelines: Vec<PipelineId>,
    pub spec: QuantSpec,
    pub seed: u64,
    /// Rows of the sampled activation batch.
    pub batch: usize,
    /// Record wall time per pipeline. Off by default so reports are
    /// byte-reproducible.
    pub timing: bool,
}

impl CompareConfig {
    pub fn new(pipelines: Vec<PipelineId>, bits: u32, seed: u64) -> Result<Self> {
        Ok(Self {
            pipelines,
            spec: QuantSpec::new(bits, QuantMode::SymmetricSigned, Granularity::PerTensor)?,
            seed,
            batch: 128,
            timing: false,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineResult {
    pub pipeline: PipelineId,
    /// Normalized Flatness of `W` with unit weights.
    pub flatness_before: f64,
    /// Same for the transformed weight.
    pub flatness_after: f64,
    pub weight_mse: f64,
    pub output_mse: f64,
    pub bin_occupancy_uniformity: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub wall_time_ms: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonReport {
    pub seed: u64,
    pub dims: [usize; 2],
    pub bits: u32,
    pub spec: QuantSpec,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub profile: Option<OutlierProfile>,
    pub pipelines: Vec<PipelineResult>,
}

impl ComparisonReport {
    pub fn get(&self, id: PipelineId) -> Option<&PipelineResult> {
        self.pipelines.iter().find(|p| p.pipeline == id)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "{COMPARE_COLUMNS}")?;
        for p in &self.pipelines {
            writeln!(
                w,
                "{},{},{},{},{:?},{:?},{:?},{:?},{:?},{}",
                self.seed,
                p.pipeline,
                self.dims[0],
                self.dims[1],
                p.flatness_before,
                p.flatness_after,
                p.weight_mse,
                p.output_mse,
                p.bin_occupancy_uniformity,
                p.wall_time_ms.map(|t| format!("{t:?}")).unwrap_or_default()
            )?;
        }
        Ok(())
    }
}

pub const COMPARE_COLUMNS: &str =
    "seed,pipeline,rows,cols,flatness_before,flatness_after,weight_mse,output_mse,bin_occupancy_uniformity,wall_time_ms";

/// `(r, s)` with `r s = n` and `r` the largest divisor not above `sqrt(n)`.
pub fn kron_factors(n: usize) -> (usize, usize) {
    let r = (1..=n).take_while(|r| r * r <= n).filter(|r| n % r == 0).last().unwrap_or(1);
    (r, n / r)
}

/// Orthogonal Kronecker-factored rotation of order `n`, materialized.
pub fn kron_rotation(n: usize, seed: u64) -> Result<Matrix> {
    let (r, s) = kron_factors(n);
    let kt = KroneckerTransform::new(
        cayley(&random_skew(r, seed, 1.0 / (r as f64).sqrt()))?,
        cayley(&random_skew(s, seed.wrapping_add(1), 1.0 / (s as f64).sqrt()))?,
    )?;
    kronecker_apply(&Matrix::identity(n), &kt, Side::Right)
}

/// Transform pair realizing `pipeline` on a weight `W: n x m`.
pub fn build_pair(w: &Matrix, pipeline: PipelineId, seed: u64) -> Result<TransformPair> {
    let (n, m) = w.shape();
    let rotation = || -> Result<(Matrix, RotationMeta)> {
        Ok((
            random_rotation(n, seed, true)?,
            RotationMeta {
                seed: Some(seed),
                with_hadamard: true,
            },
        ))
    };
    let diag = || -> Result<TransformPair> {
        let (_, t) = optimize_flatness(w, DEFAULT_TOL, DEFAULT_MAX_ITERS)?;
        Ok(TransformPair::from_bidiagonal(&t))
    };
    match pipeline {
        PipelineId::None => Ok(TransformPair::identity(n, m)),
        PipelineId::Rot => {
            let (r, meta) = rotation()?;
            TransformPair::identity(n, m).with_rotation(r, meta)
        }
        PipelineId::Diag => diag(),
        PipelineId::Bdq => {
            let (r, meta) = rotation()?;
            diag()?.with_rotation(r, meta)
        }
        PipelineId::Kron => TransformPair::identity(n, m).with_rotation(
            kron_rotation(n, seed)?,
            RotationMeta {
                seed: Some(seed),
                with_hadamard: false,
            },
        ),
    }
}

fn weight_codes_occupancy(wt: &Matrix, spec: &QuantSpec) -> Result<f64> {
    let grouped = match spec.granularity {
        Granularity::PerTensor => wt.clone(),
        Granularity::PerRow => wt.transpose(),
    };
    Ok(bin_occupancy(&quantize(&grouped, spec)?)?.uniformity)
}

/// Runs every requested pipeline on `w` (applied as `y = x W`) against a
/// seeded `N(0, 1)` activation batch.
pub fn compare(w: &Matrix, cfg: &CompareConfig, profile: Option<OutlierProfile>) -> Result<ComparisonReport> {
    cfg.spec.validate()?;
    if cfg.pipelines.is_empty() {
        return Err(BdqError::Parameter("no pipelines requested".into()));
    }
    let (n, m) = w.shape();
    if (cfg.pipelines.contains(&PipelineId::Rot) || cfg.pipelines.contains(&PipelineId::Bdq)) && !n.is_power_of_two()
    {
        return Err(BdqError::UnsupportedDimension(n));
    }
    let x = gaussian_matrix(&mut rng_from_seed(cfg.seed ^ 0x5eed_ac71), cfg.batch, n, 1.0);
    let reference = x.matmul(w)?;
    let flatness_before = raw_flatness(w)?;
    let mut pipelines = Vec::with_capacity(cfg.pipelines.len());
    for &id in &cfg.pipelines {
        let start = Instant::now();
        let pair = build_pair(w, id, cfg.seed)?;
        let wt = pair.transform_weight(w)?;
        let restored = pair.restore_weight(&quantize_weight(&wt, &cfg.spec)?)?;
        let y = apply_pair_forward(&x, w, &pair, Some(&cfg.spec))?;
        let elapsed = start.elapsed().as_secs_f64() * 1e3;
        pipelines.push(PipelineResult {
            pipeline: id,
            flatness_before,
            flatness_after: raw_flatness(&wt)?,
            weight_mse: restored.sub(w)?.mean_square(),
            output_mse: y.sub(&reference)?.mean_square(),
            bin_occupancy_uniformity: weight_codes_occupancy(&wt, &cfg.spec)?,
            wall_time_ms: cfg.timing.then_some(elapsed),
        });
    }
    Ok(ComparisonReport {
        seed: cfg.seed,
        dims: [n, m],
        bits: cfg.spec.bits,
        spec: cfg.spec,
        profile,
        pipelines,
    })
}

/// One comparison per seed on matrices drawn from `profile` with that seed,
/// fanned out across worker threads and returned in seed order.
pub fn compare_sweep(
    profile: &OutlierProfile,
    rows: usize,
    cols: usize,
    seeds: &[u64],
    cfg: &CompareConfig,
) -> Result<Vec<ComparisonReport>> {
    with_pool(|| {
        seeds
            .par_iter()
            .map(|&seed| {
                let p = OutlierProfile { seed, ..*profile };
                let w = sample_matrix(&p, rows, cols)?;
                compare(&w, &CompareConfig { seed, ..cfg.clone() }, Some(p))
            })
            .collect()
    })
}

pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n == 0 {
        f64::NAN
    } else if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Settings of the toy-network calibration experiment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EndToEndConfig {
    pub dims: Vec<usize>,
    /// Planted outlier magnitude in units of the layer's weight scale.
    pub k: f64,
    pub outliers_per_layer: usize,
    pub calib_size: usize,
    pub heldout_size: usize,
    pub spec: QuantSpec,
    pub calibration: CalibrationConfig,
}

impl Default for EndToEndConfig {
    fn default() -> Self {
        Self {
            dims: vec![16, 16, 8],
            k: 20.0,
            outliers_per_layer: 3,
            calib_size: 128,
            heldout_size: 512,
            spec: QuantSpec {
                bits: 4,
                mode: QuantMode::SymmetricSigned,
                granularity: Granularity::PerTensor,
                clip: None,
            },
            calibration: CalibrationConfig::default(),
        }
    }
}

/// Held-out quantized-output MSE against the full-precision network.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EndToEndResult {
    pub seed: u64,
    pub none: f64,
    pub rot: f64,
    pub bdq: f64,
    pub diverged: bool,
}

/// Planted-outlier toy network quantized with identity pairs (`none`), with
/// rotations only (`rot`), and with rotations plus calibrated diagonals
/// (`bdq`, diagonals initialized at identity).
pub fn end_to_end(seed: u64, cfg: &EndToEndConfig) -> Result<EndToEndResult> {
    let net = ToyNetwork::planted(seed, &cfg.dims, cfg.k, cfg.outliers_per_layer)?;
    let mut rng = rng_from_seed(seed.wrapping_add(0x00e2_e000));
    let n = net.in_dim();
    let train = gaussian_matrix(&mut rng, cfg.calib_size, n, 1.0);
    let heldout = gaussian_matrix(&mut rng, cfg.heldout_size, n, 1.0);
    let teacher = net.teacher_forward(&heldout)?;
    let mse = |net: &ToyNetwork| -> Result<f64> { Ok(net.forward(&heldout, Some(&cfg.spec))?.sub(&teacher)?.mean_square()) };
    let rot = net.with_rotations(seed)?;
    let calib_cfg = CalibrationConfig {
        seed,
        calib_set_size: cfg.calib_size,
        ..cfg.calibration
    };
    let out = calibrate(
        &rot,
        &CalibrationData {
            train,
            heldout: None,
        },
        Some(&cfg.spec),
        &calib_cfg,
    )?;
    let bdq = rot.with_pairs(out.pairs)?;
    Ok(EndToEndResult {
        seed,
        none: mse(&net)?,
        rot: mse(&rot)?,
        bdq: mse(&bdq)?,
        diverged: out.diverged_at.is_some(),
    })
}

pub fn end_to_end_sweep(seeds: &[u64], cfg: &EndToEndConfig) -> Result<Vec<EndToEndResult>> {
    with_pool(|| seeds.par_iter().map(|&s| end_to_end(s, cfg)).collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EndToEndSummary {
    pub seeds: usize,
    pub median_none: f64,
    pub median_rot: f64,
    pub median_bdq: f64,
    pub bdq_beats_none: usize,
    pub bdq_beats_rot: usize,
}

pub fn summarize_end_to_end(results: &[EndToEndResult]) -> EndToEndSummary {
    let col = |f: fn(&EndToEndResult) -> f64| median(&results.iter().map(f).collect::<Vec<_>>());
    EndToEndSummary {
        seeds: results.len(),
        median_none: col(|r| r.none),
        median_rot: col(|r| r.rot),
        median_bdq: col(|r| r.bdq),
        bdq_beats_none: results.iter().filter(|r| r.bdq < r.none).count(),
        bdq_beats_rot: results.iter().filter(|r| r.bdq < r.rot).count(),
    }
}

/// Small-calibration-set probe: where the held-out CE minimum falls when
/// training long on a handful of samples, and the held-out CE reached by CE
/// and RCE training.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OverfitProbe {
    pub seed: u64,
    pub best_epoch: usize,
    pub final_epoch: usize,
    pub minimum_before_final: bool,
    pub ce_trained_heldout_ce: f64,
    pub rce_trained_heldout_ce: f64,
}

pub fn overfit_probe(seed: u64, calib_size: usize, epochs: usize, cfg: &EndToEndConfig) -> Result<OverfitProbe> {
    let net = ToyNetwork::planted(seed, &cfg.dims, cfg.k, cfg.outliers_per_layer)?.with_rotations(seed)?;
    let mut rng = rng_from_seed(seed.wrapping_add(0x0f17));
    let n = net.in_dim();
    let data = CalibrationData {
        train: gaussian_matrix(&mut rng, calib_size, n, 1.0),
        heldout: Some(gaussian_matrix(&mut rng, cfg.heldout_size, n, 1.0)),
    };
    let base = CalibrationConfig {
        seed,
        epochs,
        calib_set_size: calib_size,
        ..cfg.calibration
    };
    let ce = calibrate(&net, &data, Some(&cfg.spec), &CalibrationConfig { loss: LossKind::Ce, ..base })?;
    let rce = calibrate(&net, &data, Some(&cfg.spec), &CalibrationConfig { loss: LossKind::Rce, ..base })?;
    let held = data.heldout.as_ref().expect("held-out batch");
    let heldout_ce = |pairs| -> Result<f64> {
        Ok(loss_and_gradient(&net.with_pairs(pairs)?, held, Some(&cfg.spec), LossKind::Ce, 1.0)?.0)
    };
    let best_epoch = ce.best_heldout_epoch().unwrap_or(0);
    let final_epoch = ce.trace.last().map_or(0, |r| r.epoch);
    Ok(OverfitProbe {
        seed,
        best_epoch,
        final_epoch,
        minimum_before_final: best_epoch < final_epoch,
        ce_trained_heldout_ce: heldout_ce(ce.pairs)?,
        rce_trained_heldout_ce: heldout_ce(rce.pairs)?,
    })
}

pub fn overfit_sweep(seeds: &[u64], calib_size: usize, epochs: usize, cfg: &EndToEndConfig) -> Result<Vec<OverfitProbe>> {
    with_pool(|| seeds.par_iter().map(|&s| overfit_probe(s, calib_size, epochs, cfg)).collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Suite {
    ErrorModel,
    Flatness,
    Transforms,
    Losses,
    All,
}

impl FromStr for Suite {
    type Err = BdqError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "error_model" => Ok(Suite::ErrorModel),
            "flatness" => Ok(Suite::Flatness),
            "transforms" => Ok(Suite::Transforms),
            "losses" => Ok(Suite::Losses),
            "all" => Ok(Suite::All),
            _ => Err(BdqError::Parameter(format!(
                "unknown suite '{s}' (expected error_model, flatness, transforms, losses, all)"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Comparison {
    AtMost,
    AtLeast,
    Below,
    Above,
}

/// One machine-checkable claim: `measured <cmp> tolerance`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Check {
    pub suite: Suite,
    pub name: String,
    pub measured: f64,
    pub comparison: Comparison,
    pub tolerance: f64,
    pub passed: bool,
}

impl Check {
    pub fn new(suite: Suite, name: &str, measured: f64, comparison: Comparison, tolerance: f64) -> Self {
        let passed = match comparison {
            Comparison::AtMost => measured <= tolerance,
            Comparison::AtLeast => measured >= tolerance,
            Comparison::Below => measured < tolerance,
            Comparison::Above => measured > tolerance,
        };
        Self {
            suite,
            name: name.to_string(),
            measured,
            comparison,
            tolerance,
            passed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub suite: Suite,
    pub passed: bool,
    pub checks: Vec<Check>,
}

/// Max relative deviation of the unquantized pair forward pass from `x W`
/// over `instances` random pairs of each input width in `dims`.
pub fn equivalence_deviation(dims: &[usize], instances: usize, seed: u64) -> Result<f64> {
    let mut worst = 0.0f64;
    let mut rng = rng_from_seed(seed);
    for &n in dims {
        for i in 0..instances {
            let m = rng.random_range(1..=n);
            let x = gaussian_matrix(&mut rng, 4, n, 1.0);
            let w = gaussian_matrix(&mut rng, n, m, 1.0);
            let l1 = gaussian_matrix(&mut rng, 1, n, 1.0).map(f64::exp).into_vec();
            let l2 = gaussian_matrix(&mut rng, 1, m, 1.0).map(f64::exp).into_vec();
            let rseed = seed.wrapping_mul(1000).wrapping_add(i as u64);
            let pair = TransformPair {
                lambda1: l1,
                lambda2: l2,
                ..TransformPair::identity(n, m)
            }
            .with_rotation(
                random_rotation(n, rseed, true)?,
                RotationMeta {
                    seed: Some(rseed),
                    with_hadamard: true,
                },
            )?;
            let y = apply_pair_forward(&x, &w, &pair, None)?;
            let reference = x.matmul(&w)?;
            worst = worst.max(y.max_abs_diff(&reference)? / reference.max_abs());
        }
    }
    Ok(worst)
}

/// Largest unclipped reconstruction error in units of `delta/2 + 4 ulp(x)`
/// over `vectors` random vectors; at most 1 when the bound holds.
pub fn half_step_bound_ratio(vectors: usize, seed: u64) -> Result<f64> {
    let mut rng = rng_from_seed(seed);
    let mut worst = 0.0f64;
    for i in 0..vectors {
        let len = rng.random_range(1..=64);
        let scale = 10f64.powf(rng.random_range(-3.0..3.0));
        let v = gaussian_matrix(&mut rng, 1, len, scale);
        let mode = [QuantMode::SymmetricSigned, QuantMode::MinMaxAffine][i % 2];
        let bits = rng.random_range(2..=12);
        let spec = QuantSpec::new(bits, mode, Granularity::PerTensor)?;
        let q = quantize(&v, &spec)?;
        let deq = crate::quantizer::dequantize(&q);
        let delta = q.scales[0];
        for (a, b) in v.as_slice().iter().zip(deq.as_slice()) {
            let bound = delta / 2.0 + 4.0 * ulp(a.abs().max(b.abs()));
            worst = worst.max((a - b).abs() / bound);
        }
    }
    Ok(worst)
}

/// Spacing between `x` and the next larger float.
pub fn ulp(x: f64) -> f64 {
    let x = x.abs();
    if x == 0.0 {
        f64::MIN_POSITIVE
    } else {
        f64::from_bits(x.to_bits() + 1) - x
    }
}

/// Measured total error of the clipped range quantizer at `k = 100`,
/// `p = 0.01` relative to `p w^2 x` with `w^2 = (k sigma)^2`, plus the
/// predicted outlier share of the total.
pub fn dominance_measurement(samples: usize, seed: u64) -> Result<(f64, f64)> {
    let profile = OutlierProfile::new(1.0, 100.0, 0.01, seed)?;
    let delta = scale_from_range(4.0, 4)?;
    let r = monte_carlo_decomposition(&profile, 4, 1.0, delta, samples)?;
    let approx = crate::error_model::dominance_approx(0.01, 100.0, 1.0);
    Ok((r.empirical_mse.unwrap_or(f64::NAN) / approx, r.dominance_ratio))
}

/// Flatness optimizer against the lattice oracle on random small matrices:
/// `(max |F_opt - F_grid|, max stationarity residual)`.
pub fn flatness_oracle_gap(count: usize, seed: u64) -> Result<(f64, f64)> {
    let mut gap = 0.0f64;
    let mut stat = 0.0f64;
    for i in 0..count {
        let (r, c) = if i % 2 == 0 { (2, 2) } else { (2, 3) };
        let w = gaussian_matrix(&mut rng_from_seed(seed.wrapping_add(i as u64)), r, c, 1.0);
        let (state, _) = optimize_flatness(&w, DEFAULT_TOL, DEFAULT_MAX_ITERS)?;
        gap = gap.max((grid_search_flatness(&w)? - state.f).abs());
        stat = stat.max(stationarity_residual(&w, &state)?);
    }
    Ok((gap, stat))
}

/// `max |F - (-ln(m n))|` for rank-1 magnitude inputs `|W_ij| = a_i b_j`.
pub fn rank_one_flatness_gap(count: usize, seed: u64) -> Result<f64> {
    let mut rng = rng_from_seed(seed);
    let mut gap = 0.0f64;
    for _ in 0..count {
        let m = rng.random_range(1..=6);
        let n = rng.random_range(1..=6);
        let a: Vec<f64> = (0..m).map(|_| rng.random_range(0.1..10.0)).collect();
        let b: Vec<f64> = (0..n).map(|_| rng.random_range(0.1..10.0)).collect();
        let w = Matrix::from_fn(m, n, |i, j| {
            let s = if (i + j) % 3 == 0 { -1.0 } else { 1.0 };
            s * a[i] * b[j]
        });
        let (state, _) = optimize_flatness(&w, DEFAULT_TOL, DEFAULT_MAX_ITERS)?;
        gap = gap.max((state.f + ((m * n) as f64).ln()).abs());
    }
    Ok(gap)
}

/// Seeded `n x n` Gaussian matrix with `count` outliers of magnitude in
/// `[20, 100)` at distinct rows and columns.
pub fn planted_outliers(seed: u64, n: usize, count: usize) -> (Matrix, Vec<(usize, usize)>) {
    let mut rng = rng_from_seed(seed);
    let mut w = gaussian_matrix(&mut rng, n, n, 1.0);
    let mut rows: Vec<usize> = (0..n).collect();
    let mut cols: Vec<usize> = (0..n).collect();
    rows.shuffle(&mut rng);
    cols.shuffle(&mut rng);
    let outliers: Vec<(usize, usize)> = rows.into_iter().zip(cols).take(count.min(n)).collect();
    for &(i, j) in &outliers {
        let sign = if rng.random::<bool>() { 1.0 } else { -1.0 };
        w[(i, j)] = sign * rng.random_range(20.0..100.0);
    }
    (w, outliers)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SuppressionSummary {
    /// Max over seeds of `|diag residual - k|`.
    pub diag_residual_gap: f64,
    /// Max over seeds and outliers of `||W_hat_ij| - 1|`.
    pub magnitude_gap: f64,
    /// Seeds where the Kronecker residual is at least the diagonal one.
    pub kron_not_better: usize,
    pub seeds: usize,
}

pub fn suppression_sweep(seeds: &[u64], n: usize, k: usize) -> Result<SuppressionSummary> {
    let (r, s) = kron_factors(n);
    let per_seed: Vec<Result<(f64, f64, bool)>> = with_pool(|| {
        seeds
            .par_iter()
            .map(|&seed| {
                let (w, outliers) = planted_outliers(seed, n, k);
                let t = outlier_suppression_diagonal(&w, &outliers)?;
                let mag = outliers
                    .iter()
                    .map(|&(i, j)| (w[(i, j)].abs() / (t.d1[i] * t.d2[j]) - 1.0).abs())
                    .fold(0.0, f64::max);
                let rep = budget_comparison(&w, &outliers, r, s, &KronFitConfig::default())?;
                Ok(((rep.diag_residual - k as f64).abs(), mag, rep.kron_residual >= rep.diag_residual))
            })
            .collect()
    });
    let mut out = SuppressionSummary {
        diag_residual_gap: 0.0,
        magnitude_gap: 0.0,
        kron_not_better: 0,
        seeds: seeds.len(),
    };
    for r in per_seed {
        let (gap, mag, ok) = r?;
        out.diag_residual_gap = out.diag_residual_gap.max(gap);
        out.magnitude_gap = out.magnitude_gap.max(mag);
        out.kron_not_better += ok as usize;
    }
    Ok(out)
}

/// Count of random matrices whose numerical rank survives a random positive
/// bidiagonal scaling.
pub fn diagonal_rank_preserved(count: usize, seed: u64) -> Result<usize> {
    let mut rng = rng_from_seed(seed);
    let mut kept = 0;
    for _ in 0..count {
        let m = rng.random_range(2..=8);
        let n = rng.random_range(2..=8);
        let rank = rng.random_range(1..=m.min(n));
        let w = gaussian_matrix(&mut rng, m, rank, 1.0).matmul(&gaussian_matrix(&mut rng, rank, n, 1.0))?;
        let t = BiDiagonalTransform {
            d1: (0..m).map(|_| rng.random_range(-2.0f64..2.0).exp()).collect(),
            d2: (0..n).map(|_| rng.random_range(-2.0f64..2.0).exp()).collect(),
        };
        let rep = rank_preservation_check(&w, RankTransform::BiDiagonal(&t))?;
        kept += (rep.preserved && rep.zero_pattern_preserved && rep.rank_before == rank) as usize;
    }
    Ok(kept)
}

/// `(rank before, rank after)` of a full-rank `4 x 4` under `P1 ⊗ P2` with a
/// rank-1 `P1`.
pub fn kronecker_rank_collapse(seed: u64) -> Result<(usize, usize)> {
    let mut rng = rng_from_seed(seed);
    let w = gaussian_matrix(&mut rng, 4, 4, 1.0);
    let u = gaussian_matrix(&mut rng, 2, 1, 1.0);
    let kt = KroneckerTransform::new(u.matmul(&u.transpose())?, gaussian_matrix(&mut rng, 2, 2, 1.0))?;
    let rep = rank_preservation_check(&w, RankTransform::Kronecker(&kt, Side::Right))?;
    Ok((rep.rank_before, rep.rank_after))
}

/// Max `|rce(q, p, 1) - (CE(q, p) - H(p))|` over random pairs.
pub fn rce_identity_gap(count: usize, seed: u64) -> Result<f64> {
    let mut rng = rng_from_seed(seed);
    let mut gap = 0.0f64;
    for _ in 0..count {
        let n = rng.random_range(2..=10);
        let q = random_simplex(&mut rng, n);
        let p = random_simplex(&mut rng, n);
        gap = gap.max((rce_loss(&q, &p, 1.0)? - (cross_entropy(&q, &p)? - entropy(&p)?)).abs());
    }
    Ok(gap)
}

/// Max relative error of the analytic RCE gradient against central
/// differences (step `1e-6`) over random `(q, p, delta)`.
pub fn rce_gradient_error(count: usize, seed: u64) -> Result<f64> {
    let mut rng = rng_from_seed(seed);
    let mut worst = 0.0f64;
    for _ in 0..count {
        let n = rng.random_range(2..=10);
        let q = random_simplex(&mut rng, n);
        let p = random_simplex(&mut rng, n);
        let delta = rng.random_range(0.0..=1.0);
        let g = rce_gradient(&q, &p, delta)?;
        // the loss formula itself, free of the simplex check
        let f = |x: &[f64]| -> f64 {
            -q.iter()
                .zip(x)
                .map(|(&qi, &pi)| qi * pi.ln() - pi * (delta * pi + (1.0 - delta) * qi).ln())
                .sum::<f64>()
        };
        let fd = central_difference(f, &p, 1e-6);
        for (a, b) in g.iter().zip(&fd) {
            worst = worst.max((a - b).abs() / a.abs().max(1.0));
        }
    }
    Ok(worst)
}

fn random_simplex(rng: &mut impl Rng, n: usize) -> Vec<f64> {
    let w: Vec<f64> = (0..n).map(|_| rng.random_range(0.05..1.0)).collect();
    let s: f64 = w.iter().sum();
    w.into_iter().map(|v| v / s).collect()
}

/// Runs `cmd_compare`'s computation twice and reports whether the JSON and
/// CSV renderings are byte-identical.
pub fn compare_is_deterministic(seed: u64) -> Result<bool> {
    let profile = OutlierProfile::new(1.0, 100.0, 0.001, seed)?;
    let w = sample_matrix(&profile, 64, 64)?;
    let cfg = CompareConfig::new(PipelineId::ALL.to_vec(), 4, seed)?;
    let render = || -> Result<(String, Vec<u8>)> {
        let r = compare(&w, &cfg, Some(profile))?;
        let mut csv = Vec::new();
        r.write_csv(&mut csv)?;
        Ok((r.to_json()?, csv))
    };
    Ok(render()? == render()?)
}

fn error_model_checks(out: &mut Vec<Check>) -> Result<()> {
    let s = Suite::ErrorModel;
    for bits in [4, 8] {
        let ratio = uniform_noise_ratio(bits, 1_000_000, bits as u64)?;
        out.push(Check::new(s, &format!("uniform_noise_ratio_b{bits}_min"), ratio, Comparison::AtLeast, 0.8));
        out.push(Check::new(s, &format!("uniform_noise_ratio_b{bits}_max"), ratio, Comparison::AtMost, 1.2));
    }
    let profile = OutlierProfile::new(1.0, 100.0, 0.01, 42)?;
    let r = monte_carlo_decomposition(&profile, 4, 1.0, scale_from_range(4.0, 4)?, 1_000_000)?;
    let rel = (r.empirical_mse.unwrap_or(f64::NAN) - r.total_predicted).abs() / r.total_predicted;
    out.push(Check::new(s, "decomposition_vs_monte_carlo_rel", rel, Comparison::Below, MC_REL_TOLERANCE));
    let (ratio, share) = dominance_measurement(1_000_000, 7)?;
    out.push(Check::new(s, "dominance_measured_over_approx_max", ratio, Comparison::AtMost, 2.0));
    out.push(Check::new(s, "dominance_measured_over_approx_min", ratio, Comparison::AtLeast, 0.5));
    out.push(Check::new(s, "dominance_outlier_share", share, Comparison::Above, 0.95));
    out.push(Check::new(s, "half_step_bound_ratio", half_step_bound_ratio(10_000, 3)?, Comparison::AtMost, 1.0));
    Ok(())
}

fn flatness_checks(out: &mut Vec<Check>) -> Result<()> {
    let s = Suite::Flatness;
    let (gap, stat) = flatness_oracle_gap(100, 11)?;
    out.push(Check::new(s, "grid_search_gap", gap, Comparison::AtMost, 1e-3));
    out.push(Check::new(s, "stationarity_residual", stat, Comparison::AtMost, 1e-6));
    out.push(Check::new(s, "rank_one_gap", rank_one_flatness_gap(20, 12)?, Comparison::AtMost, 1e-9));
    let w = sample_matrix(&OutlierProfile::new(1.0, 50.0, 0.01, 5)?, 16, 16)?;
    let (state, _) = optimize_flatness(&w, DEFAULT_TOL, DEFAULT_MAX_ITERS)?;
    out.push(Check::new(s, "optimized_not_above_raw", state.f - raw_flatness(&w)?, Comparison::AtMost, 0.0));
    Ok(())
}

fn transform_checks(out: &mut Vec<Check>) -> Result<()> {
    let s = Suite::Transforms;
    let dev = equivalence_deviation(&[8, 16, 64], 34, 21)?;
    out.push(Check::new(s, "equivalence_rel_deviation", dev, Comparison::AtMost, 1e-10));
    let kept = diagonal_rank_preserved(100, 22)?;
    out.push(Check::new(s, "diagonal_rank_preserved", kept as f64, Comparison::AtLeast, 100.0));
    let (before, after) = kronecker_rank_collapse(23)?;
    out.push(Check::new(s, "kron_rank_before", before as f64, Comparison::AtLeast, 4.0));
    out.push(Check::new(s, "kron_rank_after", after as f64, Comparison::Below, 4.0));
    let seeds: Vec<u64> = (0..20).collect();
    let sup = suppression_sweep(&seeds, 64, 8)?;
    out.push(Check::new(s, "closed_form_residual_gap", sup.diag_residual_gap, Comparison::AtMost, 1e-9));
    out.push(Check::new(s, "closed_form_magnitude_gap", sup.magnitude_gap, Comparison::AtMost, 1e-12));
    out.push(Check::new(s, "kron_not_better_seeds", sup.kron_not_better as f64, Comparison::AtLeast, 18.0));
    let identical = compare_is_deterministic(31)?;
    out.push(Check::new(s, "compare_byte_identical", identical as u8 as f64, Comparison::AtLeast, 1.0));
    let w = sample_matrix(&OutlierProfile::new(1.0, 100.0, 0.001, 8)?, 64, 64)?;
    let r = compare(&w, &CompareConfig::new(vec![PipelineId::None, PipelineId::Diag], 4, 8)?, None)?;
    let none = r.get(PipelineId::None).map_or(f64::NAN, |p| p.flatness_after);
    let diag = r.get(PipelineId::Diag).map_or(f64::NAN, |p| p.flatness_after);
    out.push(Check::new(s, "diag_flatness_not_above_none", diag - none, Comparison::AtMost, 0.0));
    let grid = Matrix::from_rows(&[vec![7.0, -3.0], vec![0.0, 5.0]])?;
    let r = compare(&grid, &CompareConfig::new(vec![PipelineId::None], 4, 0)?, None)?;
    out.push(Check::new(s, "grid_aligned_weight_mse", r.pipelines[0].weight_mse, Comparison::AtMost, 0.0));
    Ok(())
}

fn loss_checks(out: &mut Vec<Check>) -> Result<()> {
    let s = Suite::Losses;
    out.push(Check::new(s, "rce_delta_one_identity", rce_identity_gap(100, 41)?, Comparison::AtMost, 1e-12));
    out.push(Check::new(s, "rce_gradient_rel_error", rce_gradient_error(100, 42)?, Comparison::AtMost, 1e-5));
    let example = rce_loss(&[1.0, 0.0], &[0.5, 0.5], 0.5)?;
    out.push(Check::new(s, "rce_example_gap", (example + 0.1438).abs(), Comparison::AtMost, 1e-4));
    let seeds: Vec<u64> = (0..20).collect();
    let sum = summarize_end_to_end(&end_to_end_sweep(&seeds, &EndToEndConfig::default())?);
    out.push(Check::new(s, "e2e_median_bdq_minus_rot", sum.median_bdq - sum.median_rot, Comparison::Below, 0.0));
    out.push(Check::new(s, "e2e_median_rot_minus_none", sum.median_rot - sum.median_none, Comparison::Below, 0.0));
    let frac = sum.bdq_beats_none as f64 / sum.seeds as f64;
    out.push(Check::new(s, "e2e_bdq_beats_identity_fraction", frac, Comparison::AtLeast, 0.9));
    Ok(())
}

pub fn validate(suite: Suite) -> Result<ValidationReport> {
    let mut checks = Vec::new();
    let all = suite == Suite::All;
    if all || suite == Suite::ErrorModel {
        error_model_checks(&mut checks)?;
    }
    if all || suite == Suite::Flatness {
        flatness_checks(&mut checks)?;
    }
    if all || suite == Suite::Transforms {
        transform_checks(&mut checks)?;
    }
    if all || suite == Suite::Losses {
        loss_checks(&mut checks)?;
    }
    Ok(ValidationReport {
        suite,
        passed: checks.iter().all(|c| c.passed),
        checks,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pipeline_ids_parse() {
        assert_eq!(parse_pipelines("none,bdq").unwrap(), vec![PipelineId::None, PipelineId::Bdq]);
        assert!(parse_pipelines("none,none").is_err());
        assert!(parse_pipelines("magic").is_err());
        assert!(parse_pipelines("").is_err());
        for id in PipelineId::ALL {
            assert_eq!(id.to_string().parse::<PipelineId>().unwrap(), id);
        }
    }

    #[test]
    fn kron_factors_balanced() {
        assert_eq!(kron_factors(64), (8, 8));
        assert_eq!(kron_factors(32), (4, 8));
        assert_eq!(kron_factors(12), (3, 4));
        assert_eq!(kron_factors(7), (1, 7));
        assert!(kron_rotation(32, 1).unwrap().orthogonality_defect() < 1e-10);
    }

    #[test]
    fn compare_reports_every_pipeline_once() {
        let w = sample_matrix(&OutlierProfile::new(1.0, 100.0, 0.002, 1).unwrap(), 16, 8).unwrap();
        let cfg = CompareConfig::new(PipelineId::ALL.to_vec(), 4, 1).unwrap();
        let r = compare(&w, &cfg, None).unwrap();
        assert_eq!(r.pipelines.len(), 5);
        for id in PipelineId::ALL {
            assert_eq!(r.pipelines.iter().filter(|p| p.pipeline == id).count(), 1);
        }
        assert!(r.get(PipelineId::Diag).unwrap().flatness_after <= r.get(PipelineId::None).unwrap().flatness_after);
        assert!(r.pipelines.iter().all(|p| p.wall_time_ms.is_none()));
    }

    #[test]
    fn compare_rejects_non_power_of_two_rotation() {
        let w = gaussian_matrix(&mut rng_from_seed(0), 12, 4, 1.0);
        let cfg = CompareConfig::new(vec![PipelineId::Rot], 4, 0).unwrap();
        assert!(matches!(compare(&w, &cfg, None), Err(BdqError::UnsupportedDimension(12))));
        let cfg = CompareConfig::new(vec![PipelineId::Diag, PipelineId::Kron], 4, 0).unwrap();
        assert!(compare(&w, &cfg, None).is_ok());
    }

    #[test]
    fn grid_aligned_none_is_exact() {
        let grid = Matrix::from_rows(&[vec![7.0, -3.0], vec![0.0, 5.0]]).unwrap();
        let r = compare(&grid, &CompareConfig::new(vec![PipelineId::None], 4, 0).unwrap(), None).unwrap();
        assert_eq!(r.pipelines[0].weight_mse, 0.0);
    }

    #[test]
    fn report_csv_schema() {
        let w = gaussian_matrix(&mut rng_from_seed(0), 8, 4, 1.0);
        let r = compare(&w, &CompareConfig::new(vec![PipelineId::None, PipelineId::Rot], 4, 0).unwrap(), None).unwrap();
        let mut buf = Vec::new();
        r.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], COMPARE_COLUMNS);
        assert_eq!(lines.len(), 3);
        assert!(lines[1].starts_with("0,none,8,4,"));
        let parsed: ComparisonReport = serde_json::from_str(&r.to_json().unwrap()).unwrap();
        assert_eq!(parsed, r);
    }

    #[test]
    fn sweep_is_seed_ordered() {
        let profile = OutlierProfile::new(1.0, 10.0, 0.01, 0).unwrap();
        let cfg = CompareConfig::new(vec![PipelineId::None], 4, 0).unwrap();
        let r = compare_sweep(&profile, 8, 8, &[5, 3, 9], &cfg).unwrap();
        assert_eq!(r.iter().map(|r| r.seed).collect::<Vec<_>>(), vec![5, 3, 9]);
    }

    #[test]
    fn median_even_and_odd() {
        assert_eq!(median(&[3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&[4.0, 1.0, 2.0, 3.0]), 2.5);
        assert!(median(&[]).is_nan());
    }

    #[test]
    fn ulp_of_one() {
        assert_eq!(ulp(1.0), f64::EPSILON);
    }

    #[test]
    fn check_comparisons() {
        assert!(Check::new(Suite::All, "a", 1.0, Comparison::AtMost, 1.0).passed);
        assert!(!Check::new(Suite::All, "a", 1.0, Comparison::Below, 1.0).passed);
        assert!(!Check::new(Suite::All, "a", f64::NAN, Comparison::AtLeast, 0.0).passed);
    }
}
