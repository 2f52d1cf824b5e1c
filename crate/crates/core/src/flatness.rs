//! Flatness of a matrix and its optimal bidirectional diagonal scaling.
//!
//! For row weights `alpha` and column weights `beta` the matrix induces the
//! energy distribution `p_ij = W_ij^2 / (alpha_i beta_j)`. Flatness is
//! `F = sum p_ij ln p_ij`, i.e. the negative entropy of `p`, so lower is
//! flatter. It is minimized subject to `sum p_ij = 1`; the energy constant
//! `C = sum alpha_i W_ij^2 beta_j` is reported at the optimum.
//!
//! With `beta` fixed, `p` is a mixture over rows whose within-row shapes are
//! fixed, so the optimal row masses are proportional to `exp(h_i)` where `h_i`
//! is the entropy of row `i`'s shape. That gives each `alpha_i` in closed form
//! from row `i` alone; the column step is symmetric. Alternating the two exact
//! block updates never increases `F`. `F` is not convex in the log weights,
//! so the descent is restarted from several seeded points.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{shape_err, BdqError, Result};
use crate::numerics::{frobenius_normalize, rng_from_seed, Matrix};

/// Default stopping tolerance of [`optimize_flatness`].
pub const DEFAULT_TOL: f64 = 1e-13;
pub const DEFAULT_MAX_ITERS: usize = 20_000;
/// A sweep that barely lowers `F` only ends the descent once the
/// stationarity residual is this small too.
const SETTLED_STATIONARITY: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlatnessState {
    pub alpha: Vec<f64>,
    pub beta: Vec<f64>,
    #[serde(rename = "F")]
    pub f: f64,
    pub norm_residual: f64,
    pub energy_residual: f64,
    #[serde(rename = "C")]
    pub c: f64,
    pub lambda1: f64,
    pub lambda2: f64,
    pub stationarity: f64,
    pub iterations: usize,
    pub converged: bool,
}

impl FlatnessState {
    /// `alpha = beta = 1`, `C = 1`, evaluated on `w` as given.
    pub fn identity(w: &Matrix) -> Result<Self> {
        Self::evaluate(w, vec![1.0; w.rows()], vec![1.0; w.cols()], 1.0)
    }

    /// Builds a state and fills in every derived field.
    pub fn evaluate(w: &Matrix, alpha: Vec<f64>, beta: Vec<f64>, c: f64) -> Result<Self> {
        let f = flatness_with(w, &alpha, &beta)?;
        let (norm_residual, energy_residual) = residuals_with(w, &alpha, &beta, c)?;
        let fit = stationarity_with(w, &alpha, &beta)?;
        Ok(Self {
            alpha,
            beta,
            f,
            norm_residual,
            energy_residual,
            c,
            lambda1: fit.lambda1,
            lambda2: fit.lambda2,
            stationarity: fit.residual,
            iterations: 0,
            converged: false,
        })
    }

    pub fn transform(&self) -> BiDiagonalTransform {
        BiDiagonalTransform {
            d1: self.alpha.iter().map(|a| a.sqrt()).collect(),
            d2: self.beta.iter().map(|b| b.sqrt()).collect(),
        }
    }
}

fn check_weights(w: &Matrix, alpha: &[f64], beta: &[f64]) -> Result<()> {
    if alpha.len() != w.rows() || beta.len() != w.cols() {
        return Err(shape_err(
            format!("alpha[{}], beta[{}]", w.rows(), w.cols()),
            format!("alpha[{}], beta[{}]", alpha.len(), beta.len()),
        ));
    }
    if alpha.iter().chain(beta).any(|v| !(*v > 0.0 && v.is_finite())) {
        return Err(BdqError::Domain("alpha and beta must be positive and finite".into()));
    }
    Ok(())
}

fn energy_distribution(w: &Matrix, alpha: &[f64], beta: &[f64]) -> Matrix {
    Matrix::from_fn(w.rows(), w.cols(), |i, j| w[(i, j)].powi(2) / (alpha[i] * beta[j]))
}

fn plogp(p: f64) -> f64 {
    if p > 0.0 {
        p * p.ln()
    } else {
        0.0
    }
}

/// `F = sum p_ij ln p_ij` for the weights carried by `state`.
pub fn flatness_value(w: &Matrix, state: &FlatnessState) -> Result<f64> {
    flatness_with(w, &state.alpha, &state.beta)
}

pub fn flatness_with(w: &Matrix, alpha: &[f64], beta: &[f64]) -> Result<f64> {
    check_weights(w, alpha, beta)?;
    Ok(energy_distribution(w, alpha, beta).as_slice().iter().map(|&p| plogp(p)).sum())
}

/// Flatness of the Frobenius-normalized matrix at `alpha = beta = 1`.
pub fn raw_flatness(w: &Matrix) -> Result<f64> {
    let (n, _) = frobenius_normalize(w)?;
    flatness_with(&n, &vec![1.0; n.rows()], &vec![1.0; n.cols()])
}

/// `(|sum p - 1|, |sum alpha W^2 beta - C|)`.
pub fn constraint_residuals(w: &Matrix, state: &FlatnessState) -> Result<(f64, f64)> {
    residuals_with(w, &state.alpha, &state.beta, state.c)
}

fn residuals_with(w: &Matrix, alpha: &[f64], beta: &[f64], c: f64) -> Result<(f64, f64)> {
    check_weights(w, alpha, beta)?;
    let mut mass = 0.0;
    let mut energy = 0.0;
    for i in 0..w.rows() {
        for j in 0..w.cols() {
            let e = w[(i, j)].powi(2);
            mass += e / (alpha[i] * beta[j]);
            energy += alpha[i] * e * beta[j];
        }
    }
    Ok(((mass - 1.0).abs(), (energy - c).abs()))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StationarityFit {
    /// Max absolute violation over all row and column conditions.
    pub residual: f64,
    pub lambda1: f64,
    pub lambda2: f64,
}

/// Largest violation of the Lagrangian row and column stationarity
/// conditions, with both multipliers fitted by least squares.
///
/// Each condition is scaled by its own weight, so row `k` reads
/// `sum_j p_kj (ln p_kj + 1) - lambda1 r_k + lambda2 alpha_k sum_j beta_j W_kj^2 = 0`
/// with `r_k` the row mass, and columns likewise.
pub fn stationarity_residual(w: &Matrix, state: &FlatnessState) -> Result<f64> {
    Ok(stationarity_with(w, &state.alpha, &state.beta)?.residual)
}

pub fn stationarity_with(w: &Matrix, alpha: &[f64], beta: &[f64]) -> Result<StationarityFit> {
    check_weights(w, alpha, beta)?;
    let (m, n) = w.shape();
    let p = energy_distribution(w, alpha, beta);
    let mut a = Vec::with_capacity(m + n);
    let mut b = Vec::with_capacity(m + n);
    let mut c = Vec::with_capacity(m + n);
    for k in 0..m {
        let row = p.row(k);
        a.push(row.iter().map(|&v| plogp(v) + v).sum::<f64>());
        b.push(-row.iter().sum::<f64>());
        c.push(alpha[k] * (0..n).map(|j| beta[j] * w[(k, j)].powi(2)).sum::<f64>());
    }
    for l in 0..n {
        let col = p.col(l);
        a.push(col.iter().map(|&v| plogp(v) + v).sum::<f64>());
        b.push(-col.iter().sum::<f64>());
        c.push(beta[l] * (0..m).map(|i| alpha[i] * w[(i, l)].powi(2)).sum::<f64>());
    }
    // Minimize |a + lambda1 b + lambda2 c| in the least-squares sense.
    let design = DMatrix::from_fn(m + n, 2, |r, col| if col == 0 { b[r] } else { c[r] });
    let rhs = DVector::from_iterator(m + n, a.iter().map(|v| -v));
    let svd = design.svd(true, true);
    let scale = svd.singular_values.max().max(f64::MIN_POSITIVE);
    let lambdas = svd
        .solve(&rhs, 1e-12 * scale)
        .map_err(|e| BdqError::Domain(format!("multiplier fit failed: {e}")))?;
    let (l1, l2) = (lambdas[0], lambdas[1]);
    let residual = (0..m + n)
        .map(|r| (a[r] + l1 * b[r] + l2 * c[r]).abs())
        .fold(0.0, f64::max);
    Ok(StationarityFit {
        residual,
        lambda1: l1,
        lambda2: l2,
    })
}

/// Positive row scales `d1` and column scales `d2`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BiDiagonalTransform {
    pub d1: Vec<f64>,
    pub d2: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    /// `V_ij = W_ij / (d1_i d2_j)`.
    Flatten,
    /// `W_ij = V_ij d1_i d2_j`.
    Restore,
}

impl BiDiagonalTransform {
    pub fn identity(rows: usize, cols: usize) -> Self {
        Self {
            d1: vec![1.0; rows],
            d2: vec![1.0; cols],
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.d1.iter().chain(&self.d2).any(|v| !(*v > 0.0 && v.is_finite())) {
            return Err(BdqError::Domain("diagonal scales must be positive".into()));
        }
        Ok(())
    }
}

pub fn apply_bidiagonal(w: &Matrix, t: &BiDiagonalTransform, direction: Direction) -> Result<Matrix> {
    t.validate()?;
    if t.d1.len() != w.rows() || t.d2.len() != w.cols() {
        return Err(shape_err(
            format!("d1[{}], d2[{}]", w.rows(), w.cols()),
            format!("d1[{}], d2[{}]", t.d1.len(), t.d2.len()),
        ));
    }
    Ok(Matrix::from_fn(w.rows(), w.cols(), |i, j| {
        let s = t.d1[i] * t.d2[j];
        match direction {
            Direction::Flatten => w[(i, j)] / s,
            Direction::Restore => w[(i, j)] * s,
        }
    }))
}

/// Entropy of the normalized nonnegative vector, 0 if it is all zero.
fn shape_entropy(v: &[f64]) -> f64 {
    let total: f64 = v.iter().sum();
    if total <= 0.0 {
        return 0.0;
    }
    -v.iter().map(|&x| plogp(x / total)).sum::<f64>()
}

/// Unnormalized optimal row weights for fixed column weights:
/// `alpha_i = A_i exp(-h_i)` with `A_i = sum_j W_ij^2 / beta_j` and `h_i` the
/// entropy of row `i`'s shape. Each entry depends on row `i` only.
pub fn fixed_beta_row_weights(w: &Matrix, beta: &[f64]) -> Vec<f64> {
    (0..w.rows())
        .map(|i| {
            let row: Vec<f64> = w.row(i).iter().zip(beta).map(|(v, b)| v * v / b).collect();
            let mass: f64 = row.iter().sum();
            mass * (-shape_entropy(&row)).exp()
        })
        .collect()
}

fn fixed_alpha_col_weights(w: &Matrix, alpha: &[f64]) -> Vec<f64> {
    (0..w.cols())
        .map(|j| {
            let col: Vec<f64> = (0..w.rows()).map(|i| w[(i, j)].powi(2) / alpha[i]).collect();
            let mass: f64 = col.iter().sum();
            mass * (-shape_entropy(&col)).exp()
        })
        .collect()
}

/// Rescales so that `sum p = 1` and the geometric means of `alpha` and
/// `beta` agree. Neither operation changes the normalized `p`.
fn fix_gauge(w: &Matrix, alpha: &mut [f64], beta: &mut [f64]) {
    let mass: f64 = energy_distribution(w, alpha, beta).as_slice().iter().sum();
    let mean_ln = |v: &[f64]| v.iter().map(|x| x.ln()).sum::<f64>() / v.len() as f64;
    let shift = (mean_ln(beta) - (mean_ln(alpha) + mass.ln())) / 2.0;
    let ta = mass * shift.exp();
    let tb = (-shift).exp();
    alpha.iter_mut().for_each(|a| *a *= ta);
    beta.iter_mut().for_each(|b| *b *= tb);
}

fn check_no_zero_lines(w: &Matrix) -> Result<()> {
    if let Some(r) = (0..w.rows()).find(|&r| w.row(r).iter().all(|&v| v == 0.0)) {
        return Err(BdqError::Degenerate(format!("row {r} is all zero")));
    }
    if let Some(c) = (0..w.cols()).find(|&c| w.col(c).iter().all(|&v| v == 0.0)) {
        return Err(BdqError::Degenerate(format!("column {c} is all zero")));
    }
    Ok(())
}

/// Energy-balancing warm start: row energies, then column energies of the
/// row-balanced matrix.
fn sinkhorn_init(w: &Matrix) -> (Vec<f64>, Vec<f64>) {
    let alpha: Vec<f64> = (0..w.rows()).map(|i| w.row(i).iter().map(|v| v * v).sum()).collect();
    let beta: Vec<f64> = (0..w.cols())
        .map(|j| (0..w.rows()).map(|i| w[(i, j)].powi(2) / alpha[i]).sum())
        .collect();
    (alpha, beta)
}

/// Number of seeded random starts tried besides the energy-balancing and
/// unit starts. `F` is not convex in the log weights, and a descent from a
/// single start can stop in a local minimum.
pub const DEFAULT_RESTARTS: usize = 12;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FlatnessOptions {
    pub tol: f64,
    /// Sweep budget per start.
    pub max_iters: usize,
    pub restarts: usize,
    pub seed: u64,
}

impl Default for FlatnessOptions {
    fn default() -> Self {
        Self {
            tol: DEFAULT_TOL,
            max_iters: DEFAULT_MAX_ITERS,
            restarts: DEFAULT_RESTARTS,
            seed: 0,
        }
    }
}

struct Descent {
    alpha: Vec<f64>,
    beta: Vec<f64>,
    f: f64,
    iterations: usize,
    converged: bool,
}

/// Alternating exact row and column updates from the given start.
fn descend(wn: &Matrix, mut alpha: Vec<f64>, mut beta: Vec<f64>, tol: f64, max_iters: usize) -> Result<Descent> {
    fix_gauge(wn, &mut alpha, &mut beta);
    let mut f = flatness_with(wn, &alpha, &beta)?;
    let mut iterations = 0;
    let mut converged = false;
    while iterations < max_iters {
        let mut next_alpha = fixed_beta_row_weights(wn, &beta);
        let mut next_beta = fixed_alpha_col_weights(wn, &next_alpha);
        fix_gauge(wn, &mut next_alpha, &mut next_beta);
        let next_f = flatness_with(wn, &next_alpha, &next_beta)?;
        iterations += 1;
        if next_f > f {
            // Rounding noise at the optimum; keep the better state.
            converged = true;
            break;
        }
        let decrease = f - next_f;
        alpha = next_alpha;
        beta = next_beta;
        f = next_f;
        if decrease < tol && stationarity_with(wn, &alpha, &beta)?.residual < SETTLED_STATIONARITY {
            converged = true;
            break;
        }
        if iterations % 16 == 0 && stationarity_with(wn, &alpha, &beta)?.residual < tol {
            converged = true;
            break;
        }
    }
    Ok(Descent {
        alpha,
        beta,
        f,
        iterations,
        converged,
    })
}

/// Minimizes Flatness over positive row and column weights with the default
/// number of restarts.
pub fn optimize_flatness(
    w: &Matrix,
    tol: f64,
    max_iters: usize,
) -> Result<(FlatnessState, BiDiagonalTransform)> {
    optimize_flatness_with(
        w,
        &FlatnessOptions {
            tol,
            max_iters,
            ..FlatnessOptions::default()
        },
    )
}

/// Minimizes Flatness over positive row and column weights.
///
/// `w` is Frobenius-normalized internally and the returned weights refer to
/// the normalized matrix. Each start descends until a sweep lowers `F` by
/// less than `tol` on a nearly stationary point, the stationarity residual
/// drops below `tol`, or a sweep no longer lowers `F` at all; the start
/// with the lowest `F` wins and `iterations` is its sweep count.
pub fn optimize_flatness_with(w: &Matrix, opts: &FlatnessOptions) -> Result<(FlatnessState, BiDiagonalTransform)> {
    if w.is_empty() {
        return Err(BdqError::Parameter("empty matrix".into()));
    }
    check_no_zero_lines(w)?;
    let (wn, _) = frobenius_normalize(w)?;
    let (m, n) = wn.shape();

    let (a0, b0) = sinkhorn_init(&wn);
    let mut starts = vec![(a0.clone(), b0.clone()), (vec![1.0; m], vec![1.0; n])];
    let logs: Vec<f64> = wn.as_slice().iter().filter(|v| **v != 0.0).map(|v| (v * v).ln()).collect();
    let spread = logs.iter().cloned().fold(f64::MIN, f64::max) - logs.iter().cloned().fold(f64::MAX, f64::min);
    let mut rng = rng_from_seed(opts.seed);
    for _ in 0..opts.restarts {
        let jitter = |base: &[f64], rng: &mut crate::numerics::SeededRng| -> Vec<f64> {
            base.iter().map(|b| b * (spread * rng.random_range(-0.5..0.5)).exp()).collect()
        };
        let a = jitter(&a0, &mut rng);
        let b = jitter(&b0, &mut rng);
        starts.push((a, b));
    }

    let mut best: Option<Descent> = None;
    for (a, b) in starts {
        let d = descend(&wn, a, b, opts.tol, opts.max_iters)?;
        if best.as_ref().is_none_or(|cur| d.f < cur.f) {
            best = Some(d);
        }
    }
    let best = best.expect("at least one start");

    let energy: f64 = (0..m)
        .flat_map(|i| (0..n).map(move |j| (i, j)))
        .map(|(i, j)| best.alpha[i] * wn[(i, j)].powi(2) * best.beta[j])
        .sum();
    let mut state = FlatnessState::evaluate(&wn, best.alpha, best.beta, energy)?;
    state.iterations = best.iterations;
    state.converged = best.converged || state.stationarity < opts.tol;
    let transform = state.transform();
    Ok((state, transform))
}
