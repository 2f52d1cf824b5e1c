//! Dense row-major matrices, seeded outlier-contaminated sampling, entropy
//! helpers and the `BDQ1` / CSV matrix formats.

use std::fmt;
use std::io::{BufRead, Read, Write};
use std::ops::{Index, IndexMut};

use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{shape_err, BdqError, Result};

/// Magic bytes of the binary matrix format.
pub const BDQ1_MAGIC: &[u8; 4] = b"BDQ1";

/// The generator used everywhere a seed is accepted.
pub type SeededRng = ChaCha8Rng;

pub fn rng_from_seed(seed: u64) -> SeededRng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Dense row-major `f64` matrix. All entries are finite.
#[derive(Clone, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl fmt::Debug for Matrix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "Matrix {}x{} [", self.rows, self.cols)?;
        for r in 0..self.rows {
            writeln!(f, "  {:?}", self.row(r))?;
        }
        write!(f, "]")
    }
}

impl Matrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(shape_err(
                format!("{} entries for {rows}x{cols}", rows * cols),
                format!("{} entries", data.len()),
            ));
        }
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return Err(BdqError::Domain(format!(
                "non-finite entry {} at flat index {pos}",
                data[pos]
            )));
        }
        Ok(Self { rows, cols, data })
    }

    /// Builds a matrix from nested rows. Rows must share a length.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let r = rows.len();
        let c = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|row| row.len() != c) {
            return Err(BdqError::Parameter("ragged rows".into()));
        }
        Self::new(r, c, rows.concat())
    }

    pub fn row_vector(values: &[f64]) -> Result<Self> {
        Self::new(1, values.len(), values.to_vec())
    }

    /// Internal constructor for results of arithmetic on finite inputs.
    pub(crate) fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        debug_assert_eq!(data.len(), rows * cols);
        Self { rows, cols, data }
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self::from_vec(rows, cols, vec![0.0; rows * cols])
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m[(i, i)] = 1.0;
        }
        m
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                data.push(f(r, c));
            }
        }
        Self::from_vec(rows, cols, data)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn col(&self, c: usize) -> Vec<f64> {
        (0..self.rows).map(|r| self[(r, c)]).collect()
    }

    pub fn transpose(&self) -> Self {
        Self::from_fn(self.cols, self.rows, |r, c| self[(c, r)])
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self::from_vec(self.rows, self.cols, self.data.iter().map(|&v| f(v)).collect())
    }

    pub fn matmul(&self, rhs: &Matrix) -> Result<Matrix> {
        if self.cols != rhs.rows {
            return Err(shape_err(
                format!("lhs cols == rhs rows ({})", self.cols),
                format!("{}x{} * {}x{}", self.rows, self.cols, rhs.rows, rhs.cols),
            ));
        }
        let mut out = vec![0.0; self.rows * rhs.cols];
        for i in 0..self.rows {
            let out_row = &mut out[i * rhs.cols..(i + 1) * rhs.cols];
            for (k, &a) in self.row(i).iter().enumerate() {
                if a == 0.0 {
                    continue;
                }
                for (o, &b) in out_row.iter_mut().zip(rhs.row(k)) {
                    *o += a * b;
                }
            }
        }
        Ok(Matrix::from_vec(self.rows, rhs.cols, out))
    }

    fn check_same_shape(&self, other: &Matrix) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(shape_err(
                format!("{}x{}", self.rows, self.cols),
                format!("{}x{}", other.rows, other.cols),
            ));
        }
        Ok(())
    }

    pub fn sub(&self, other: &Matrix) -> Result<Matrix> {
        self.check_same_shape(other)?;
        Ok(Matrix::from_vec(
            self.rows,
            self.cols,
            self.data.iter().zip(&other.data).map(|(a, b)| a - b).collect(),
        ))
    }

    pub fn add(&self, other: &Matrix) -> Result<Matrix> {
        self.check_same_shape(other)?;
        Ok(Matrix::from_vec(
            self.rows,
            self.cols,
            self.data.iter().zip(&other.data).map(|(a, b)| a + b).collect(),
        ))
    }

    pub fn hadamard_product(&self, other: &Matrix) -> Result<Matrix> {
        self.check_same_shape(other)?;
        Ok(Matrix::from_vec(
            self.rows,
            self.cols,
            self.data.iter().zip(&other.data).map(|(a, b)| a * b).collect(),
        ))
    }

    pub fn scale(&self, s: f64) -> Matrix {
        self.map(|v| v * s)
    }

    /// `diag(d) * self`: multiplies row `i` by `d[i]`.
    pub fn scale_rows(&self, d: &[f64]) -> Result<Matrix> {
        if d.len() != self.rows {
            return Err(shape_err(format!("{} row scales", self.rows), format!("{}", d.len())));
        }
        Ok(Matrix::from_fn(self.rows, self.cols, |r, c| self[(r, c)] * d[r]))
    }

    /// `self * diag(d)`: multiplies column `j` by `d[j]`.
    pub fn scale_cols(&self, d: &[f64]) -> Result<Matrix> {
        if d.len() != self.cols {
            return Err(shape_err(format!("{} column scales", self.cols), format!("{}", d.len())));
        }
        Ok(Matrix::from_fn(self.rows, self.cols, |r, c| self[(r, c)] * d[c]))
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn max_abs_diff(&self, other: &Matrix) -> Result<f64> {
        Ok(self.sub(other)?.max_abs())
    }

    /// Mean of squared entries.
    pub fn mean_square(&self) -> f64 {
        if self.data.is_empty() {
            return 0.0;
        }
        self.data.iter().map(|v| v * v).sum::<f64>() / self.data.len() as f64
    }

    pub fn to_nalgebra(&self) -> DMatrix<f64> {
        DMatrix::from_row_slice(self.rows, self.cols, &self.data)
    }

    pub fn from_nalgebra(m: &DMatrix<f64>) -> Matrix {
        Matrix::from_fn(m.nrows(), m.ncols(), |r, c| m[(r, c)])
    }

    /// Singular values in descending order.
    pub fn singular_values(&self) -> Vec<f64> {
        if self.is_empty() {
            return Vec::new();
        }
        let mut s: Vec<f64> = self.to_nalgebra().singular_values().iter().copied().collect();
        s.sort_by(|a, b| b.total_cmp(a));
        s
    }

    /// Numerical rank with tolerance `max(m, n) * eps * sigma_max`.
    pub fn numerical_rank(&self) -> usize {
        let s = self.singular_values();
        let Some(&smax) = s.first() else { return 0 };
        if smax == 0.0 {
            return 0;
        }
        let tol = self.rows.max(self.cols) as f64 * f64::EPSILON * smax;
        s.iter().filter(|&&v| v > tol).count()
    }

    /// `max |self^T self - I|`.
    pub fn orthogonality_defect(&self) -> f64 {
        let gram = self.transpose().matmul(self).expect("square gram");
        gram.max_abs_diff(&Matrix::identity(self.cols)).expect("same shape")
    }

    pub fn write_bdq1<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(BDQ1_MAGIC)?;
        w.write_all(&dim_u32(self.rows)?.to_le_bytes())?;
        w.write_all(&dim_u32(self.cols)?.to_le_bytes())?;
        for v in &self.data {
            w.write_all(&v.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read_bdq1<R: Read>(mut r: R) -> Result<Matrix> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != BDQ1_MAGIC {
            return Err(BdqError::Format(format!("bad magic {magic:?}, expected BDQ1")));
        }
        let rows = read_u32(&mut r)? as usize;
        let cols = read_u32(&mut r)? as usize;
        let mut data = Vec::with_capacity(rows * cols);
        let mut buf = [0u8; 8];
        for _ in 0..rows * cols {
            r.read_exact(&mut buf)?;
            data.push(f64::from_le_bytes(buf));
        }
        Matrix::new(rows, cols, data)
    }

    pub fn to_bdq1_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(12 + 8 * self.len());
        self.write_bdq1(&mut out).expect("in-memory write");
        out
    }

    pub fn save_bdq1(&self, path: impl AsRef<std::path::Path>) -> Result<()> {
        let f = std::fs::File::create(path)?;
        let mut w = std::io::BufWriter::new(f);
        self.write_bdq1(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load_bdq1(path: impl AsRef<std::path::Path>) -> Result<Matrix> {
        let f = std::fs::File::open(path)?;
        Matrix::read_bdq1(std::io::BufReader::new(f))
    }

    /// One matrix row per line, comma separated. Values use Rust's shortest
    /// round-trip formatting so a CSV round trip is exact.
    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        for r in 0..self.rows {
            let line: Vec<String> = self.row(r).iter().map(|v| format!("{v:?}")).collect();
            writeln!(w, "{}", line.join(","))?;
        }
        Ok(())
    }

    pub fn read_csv<R: BufRead>(r: R) -> Result<Matrix> {
        let mut rows = Vec::new();
        for (lineno, line) in r.lines().enumerate() {
            let line = line?;
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            let row = line
                .split(',')
                .map(|tok| {
                    tok.trim().parse::<f64>().map_err(|e| {
                        BdqError::Format(format!("line {}: {tok:?}: {e}", lineno + 1))
                    })
                })
                .collect::<Result<Vec<f64>>>()?;
            rows.push(row);
        }
        Matrix::from_rows(&rows)
    }
}

fn dim_u32(n: usize) -> Result<u32> {
    u32::try_from(n).map_err(|_| BdqError::Parameter(format!("dimension {n} exceeds u32")))
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf)?;
    Ok(u32::from_le_bytes(buf))
}

impl Index<(usize, usize)> for Matrix {
    type Output = f64;

    fn index(&self, (r, c): (usize, usize)) -> &f64 {
        debug_assert!(r < self.rows && c < self.cols);
        &self.data[r * self.cols + c]
    }
}

impl IndexMut<(usize, usize)> for Matrix {
    fn index_mut(&mut self, (r, c): (usize, usize)) -> &mut f64 {
        debug_assert!(r < self.rows && c < self.cols);
        &mut self.data[r * self.cols + c]
    }
}

/// Generative model for outlier-contaminated Gaussian data.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OutlierProfile {
    pub sigma: f64,
    /// Outlier magnitude multiplier; outliers are drawn from N(0, (k sigma)^2).
    pub k: f64,
    /// Exact fraction of entries that are outliers.
    pub outlier_frac: f64,
    pub seed: u64,
}

impl OutlierProfile {
    pub fn new(sigma: f64, k: f64, outlier_frac: f64, seed: u64) -> Result<Self> {
        let p = Self {
            sigma,
            k,
            outlier_frac,
            seed,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.sigma > 0.0 && self.sigma.is_finite()) {
            return Err(BdqError::Parameter(format!("sigma must be > 0, got {}", self.sigma)));
        }
        if !(self.k >= 1.0 && self.k.is_finite()) {
            return Err(BdqError::Parameter(format!("k must be >= 1, got {}", self.k)));
        }
        if !(0.0..1.0).contains(&self.outlier_frac) {
            return Err(BdqError::Parameter(format!(
                "outlier_frac must lie in [0, 1), got {}",
                self.outlier_frac
            )));
        }
        Ok(())
    }

    /// Number of outlier entries in a `rows x cols` sample.
    pub fn outlier_count(&self, rows: usize, cols: usize) -> usize {
        (self.outlier_frac * (rows * cols) as f64).floor() as usize
    }
}

/// Samples a matrix whose entries are N(0, sigma^2) except for an exactly
/// sized, uniformly chosen index set drawn from N(0, (k sigma)^2).
///
/// The base normals are drawn first and outliers are produced by rescaling,
/// so the random stream does not depend on `k`.
pub fn sample_matrix(profile: &OutlierProfile, rows: usize, cols: usize) -> Result<Matrix> {
    sample_matrix_with_outliers(profile, rows, cols).map(|(m, _)| m)
}

/// Like [`sample_matrix`] but also returns the flat indices of the outlier set.
pub fn sample_matrix_with_outliers(
    profile: &OutlierProfile,
    rows: usize,
    cols: usize,
) -> Result<(Matrix, Vec<usize>)> {
    profile.validate()?;
    if rows == 0 || cols == 0 {
        return Err(BdqError::Parameter(format!("dims must be >= 1, got {rows}x{cols}")));
    }
    let mut rng = rng_from_seed(profile.seed);
    let n = rows * cols;
    let mut data: Vec<f64> = (0..n)
        .map(|_| profile.sigma * rng.sample::<f64, _>(StandardNormal))
        .collect();
    let count = profile.outlier_count(rows, cols);
    let mut outliers = Vec::with_capacity(count);
    if count > 0 {
        let mut idx: Vec<usize> = (0..n).collect();
        let (chosen, _) = idx.partial_shuffle(&mut rng, count);
        outliers.extend_from_slice(chosen);
        for &i in &outliers {
            data[i] *= profile.k;
        }
    }
    Ok((Matrix::from_vec(rows, cols, data), outliers))
}

/// Fills a matrix with i.i.d. standard normals scaled by `sigma`.
pub fn gaussian_matrix(rng: &mut impl Rng, rows: usize, cols: usize, sigma: f64) -> Matrix {
    let data = (0..rows * cols)
        .map(|_| sigma * rng.sample::<f64, _>(StandardNormal))
        .collect();
    Matrix::from_vec(rows, cols, data)
}

/// Shannon entropy in nats of the distribution obtained by normalizing
/// `weights`. Zero weights contribute nothing.
pub fn shannon_entropy(weights: &[f64]) -> Result<f64> {
    if let Some(w) = weights.iter().find(|w| !(**w >= 0.0) || !w.is_finite()) {
        return Err(BdqError::Domain(format!("entropy weight {w} is not a finite nonnegative value")));
    }
    let total: f64 = weights.iter().sum();
    if total <= 0.0 {
        return Err(BdqError::Domain("entropy weights sum to zero".into()));
    }
    Ok(-weights
        .iter()
        .filter(|&&w| w > 0.0)
        .map(|&w| {
            let p = w / total;
            p * p.ln()
        })
        .sum::<f64>())
}

/// Returns `W / ||W||_F` and `||W||_F`.
pub fn frobenius_normalize(w: &Matrix) -> Result<(Matrix, f64)> {
    let norm = w.frobenius_norm();
    if norm == 0.0 {
        return Err(BdqError::Domain("cannot normalize an all-zero matrix".into()));
    }
    Ok((w.scale(1.0 / norm), norm))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn sample_variance_matches_sigma() {
        let profile = OutlierProfile::new(1.0, 1.0, 0.0, 7).unwrap();
        let m = sample_matrix(&profile, 1000, 1000).unwrap();
        let mean = m.as_slice().iter().sum::<f64>() / m.len() as f64;
        let var = m.as_slice().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / m.len() as f64;
        assert!((var - 1.0).abs() < 0.01, "variance {var}");
    }

    #[test]
    fn zero_fraction_ignores_k() {
        let a = sample_matrix(&OutlierProfile::new(1.0, 1.0, 0.0, 3).unwrap(), 2, 2).unwrap();
        let b = sample_matrix(&OutlierProfile::new(1.0, 100.0, 0.0, 3).unwrap(), 2, 2).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn sampling_is_deterministic() {
        let p = OutlierProfile::new(0.5, 50.0, 0.01, 11).unwrap();
        let a = sample_matrix(&p, 32, 48).unwrap();
        let b = sample_matrix(&p, 32, 48).unwrap();
        assert_eq!(a.to_bdq1_bytes(), b.to_bdq1_bytes());
    }

    #[test]
    fn outlier_count_is_exact() {
        let p = OutlierProfile::new(1.0, 10.0, 0.05, 1).unwrap();
        let (_, idx) = sample_matrix_with_outliers(&p, 20, 20).unwrap();
        assert_eq!(idx.len(), 20);
        let mut sorted = idx.clone();
        sorted.sort_unstable();
        sorted.dedup();
        assert_eq!(sorted.len(), 20);
    }

    #[test]
    fn invalid_profiles_rejected() {
        assert!(OutlierProfile::new(0.0, 1.0, 0.0, 0).is_err());
        assert!(OutlierProfile::new(1.0, 0.5, 0.0, 0).is_err());
        assert!(OutlierProfile::new(1.0, 1.0, 1.0, 0).is_err());
        let p = OutlierProfile::new(1.0, 1.0, 0.0, 0).unwrap();
        assert!(sample_matrix(&p, 0, 3).is_err());
    }

    #[test]
    fn entropy_examples() {
        assert!((shannon_entropy(&[1.0; 4]).unwrap() - 4f64.ln()).abs() < 1e-15);
        assert_eq!(shannon_entropy(&[1.0, 0.0, 0.0, 0.0]).unwrap(), 0.0);
        let direct = -(0.75f64 * 0.75f64.ln() + 0.25 * 0.25f64.ln());
        assert!((shannon_entropy(&[3.0, 1.0]).unwrap() - direct).abs() < 1e-15);
        assert!(shannon_entropy(&[1.0, -0.1]).is_err());
        assert!(shannon_entropy(&[0.0, 0.0]).is_err());
    }

    #[test]
    fn normalize_examples() {
        let (n, s) = frobenius_normalize(&Matrix::identity(2)).unwrap();
        assert!((s - 2f64.sqrt()).abs() < 1e-15);
        assert!((n[(0, 0)] - 1.0 / 2f64.sqrt()).abs() < 1e-15);
        assert_eq!(n[(0, 1)], 0.0);

        let (n, s) = frobenius_normalize(&Matrix::row_vector(&[3.0, 4.0]).unwrap()).unwrap();
        assert_eq!(s, 5.0);
        assert!((n[(0, 0)] - 0.6).abs() < 1e-15 && (n[(0, 1)] - 0.8).abs() < 1e-15);

        assert!(frobenius_normalize(&Matrix::zeros(2, 2)).is_err());
    }

    #[test]
    fn rejects_non_finite() {
        assert!(Matrix::new(1, 2, vec![1.0, f64::NAN]).is_err());
        assert!(Matrix::new(1, 2, vec![1.0]).is_err());
    }

    #[test]
    fn bdq1_layout() {
        let m = Matrix::from_rows(&[vec![1.0, 2.0, 3.0]]).unwrap();
        let bytes = m.to_bdq1_bytes();
        assert_eq!(&bytes[..4], b"BDQ1");
        assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), 1);
        assert_eq!(u32::from_le_bytes(bytes[8..12].try_into().unwrap()), 3);
        assert_eq!(f64::from_le_bytes(bytes[12..20].try_into().unwrap()), 1.0);
        assert_eq!(bytes.len(), 12 + 24);
        assert!(Matrix::read_bdq1(&b"BDQ2\0\0\0\0\0\0\0\0"[..]).is_err());
    }

    #[test]
    fn numerical_rank_basics() {
        assert_eq!(Matrix::zeros(3, 3).numerical_rank(), 0);
        assert_eq!(Matrix::identity(4).numerical_rank(), 4);
        let r1 = Matrix::from_fn(4, 4, |r, c| (r + 1) as f64 * (c + 2) as f64);
        assert_eq!(r1.numerical_rank(), 1);
    }

    proptest! {
        #[test]
        fn entropy_bounds(w in prop::collection::vec(0.0f64..10.0, 1..32)) {
            prop_assume!(w.iter().sum::<f64>() > 0.0);
            let h = shannon_entropy(&w).unwrap();
            prop_assert!(h >= -1e-15);
            prop_assert!(h <= (w.len() as f64).ln() + 1e-12);
        }

        #[test]
        fn normalize_round_trips(seed in any::<u64>(), r in 1usize..6, c in 1usize..6) {
            let mut rng = rng_from_seed(seed);
            let w = gaussian_matrix(&mut rng, r, c, 3.0);
            let (n, s) = frobenius_normalize(&w).unwrap();
            prop_assert!((n.frobenius_norm().powi(2) - 1.0).abs() < 1e-12);
            let back = n.scale(s);
            prop_assert!(back.max_abs_diff(&w).unwrap() <= 1e-12 * w.max_abs());
        }

        #[test]
        fn io_round_trips(seed in any::<u64>(), r in 1usize..5, c in 1usize..5) {
            let mut rng = rng_from_seed(seed);
            let w = gaussian_matrix(&mut rng, r, c, 1e3);
            let bin = Matrix::read_bdq1(&w.to_bdq1_bytes()[..]).unwrap();
            prop_assert_eq!(&bin, &w);
            let mut csv = Vec::new();
            w.write_csv(&mut csv).unwrap();
            let back = Matrix::read_csv(&csv[..]).unwrap();
            prop_assert_eq!(&back, &w);
        }
    }
}
