//! Brute-force reference computations. These deliberately avoid the code
//! paths they are used to check and are only practical at tiny sizes.

use crate::numerics::{frobenius_normalize, Matrix};
use crate::Result;

/// `F` of the normalized distribution `p_ij ∝ W_ij^2 exp(-x_i - y_j)` with
/// `x_0 = y_0 = 0` and the remaining offsets taken from `params`.
fn grid_flatness(e: &Matrix, params: &[f64]) -> f64 {
    let (m, n) = e.shape();
    let x = |i: usize| if i == 0 { 0.0 } else { params[i - 1] };
    let y = |j: usize| if j == 0 { 0.0 } else { params[m - 1 + j - 1] };
    let mut q = Vec::with_capacity(m * n);
    for i in 0..m {
        for j in 0..n {
            q.push(e[(i, j)] * (-x(i) - y(j)).exp());
        }
    }
    let z: f64 = q.iter().sum();
    q.iter()
        .filter(|&&v| v > 0.0)
        .map(|&v| {
            let p = v / z;
            p * p.ln()
        })
        .sum()
}

/// Evaluates every lattice point of the box `center +- half` with `points`
/// per axis.
fn lattice(e: &Matrix, center: &[f64], half: f64, points: usize) -> Vec<(f64, Vec<f64>)> {
    let dims = center.len();
    let step = 2.0 * half / (points - 1) as f64;
    let mut idx = vec![0usize; dims];
    let mut out = Vec::new();
    'outer: loop {
        let params: Vec<f64> = idx
            .iter()
            .zip(center)
            .map(|(&k, &c)| c - half + k as f64 * step)
            .collect();
        out.push((grid_flatness(e, &params), params));
        for d in 0..dims {
            idx[d] += 1;
            if idx[d] < points {
                continue 'outer;
            }
            idx[d] = 0;
        }
        break;
    }
    out
}

/// Minimum Flatness found by exhaustive search over a lattice of log row and
/// column offsets. The best few well-separated coarse points are each refined
/// on shrinking lattices until the step falls below `1e-7`. Intended for
/// matrices with at most four free offsets.
pub fn grid_search_flatness(w: &Matrix) -> Result<f64> {
    let (wn, _) = frobenius_normalize(w)?;
    let e = wn.map(|v| v * v);
    let dims = wn.rows() - 1 + wn.cols() - 1;
    if dims == 0 {
        return Ok(grid_flatness(&e, &[]));
    }
    let logs: Vec<f64> = e.as_slice().iter().filter(|&&v| v > 0.0).map(|v| v.ln()).collect();
    let spread = logs.iter().cloned().fold(f64::MIN, f64::max) - logs.iter().cloned().fold(f64::MAX, f64::min);
    let coarse = match dims {
        1 => 2001,
        2 => 401,
        3 => 81,
        _ => 31,
    };
    let half = spread + 4.0;
    let coarse_step = 2.0 * half / (coarse - 1) as f64;
    let mut grid = lattice(&e, &vec![0.0; dims], half, coarse);
    grid.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mut seeds: Vec<Vec<f64>> = Vec::new();
    for (_, p) in grid {
        let far = seeds
            .iter()
            .all(|s| s.iter().zip(&p).any(|(a, b)| (a - b).abs() > 2.5 * coarse_step));
        if far {
            seeds.push(p);
        }
        if seeds.len() == 8 {
            break;
        }
    }
    let mut best = f64::INFINITY;
    for mut center in seeds {
        let mut half = 2.0 * coarse_step;
        loop {
            let pts = lattice(&e, &center, half, 21);
            let (f, p) = pts
                .into_iter()
                .min_by(|a, b| a.0.total_cmp(&b.0))
                .expect("nonempty lattice");
            best = best.min(f);
            center = p;
            let step = 2.0 * half / 20.0;
            if step < 1e-7 {
                break;
            }
            half = 2.0 * step;
        }
    }
    Ok(best)
}

/// Dense `A ⊗ B`.
pub fn kronecker_materialize(a: &Matrix, b: &Matrix) -> Matrix {
    let (ar, ac) = a.shape();
    let (br, bc) = b.shape();
    Matrix::from_fn(ar * br, ac * bc, |r, c| a[(r / br, c / bc)] * b[(r % br, c % bc)])
}

/// Central finite-difference gradient of `f` at `x`.
pub fn central_difference(f: impl Fn(&[f64]) -> f64, x: &[f64], h: f64) -> Vec<f64> {
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|i| {
            let orig = probe[i];
            probe[i] = orig + h;
            let up = f(&probe);
            probe[i] = orig - h;
            let down = f(&probe);
            probe[i] = orig;
            (up - down) / (2.0 * h)
        })
        .collect()
}
