//! Rotations, equivalent transform pairs and the Kronecker-factored baseline.

use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{shape_err, BdqError, Result};
use crate::flatness::{apply_bidiagonal, BiDiagonalTransform, Direction};
use crate::numerics::{gaussian_matrix, rng_from_seed, shannon_entropy, Matrix};
use crate::quantizer::{fake_quantize, fake_quantize_backward, Granularity, QuantSpec};

/// Maximum tolerated `max |R^T R - I|`.
pub const ORTHOGONALITY_TOL: f64 = 1e-10;

/// Orthonormal Sylvester-Hadamard matrix of order `n`.
pub fn hadamard(n: usize) -> Result<Matrix> {
    if n == 0 || !n.is_power_of_two() {
        return Err(BdqError::UnsupportedDimension(n));
    }
    let scale = 1.0 / (n as f64).sqrt();
    // H[r][c] = (-1)^popcount(r & c)
    Ok(Matrix::from_fn(n, n, |r, c| {
        if (r & c).count_ones() % 2 == 0 {
            scale
        } else {
            -scale
        }
    }))
}

/// Cayley map `(I - S)(I + S)^-1` of a skew-symmetric `S`.
pub fn cayley(skew: &Matrix) -> Result<Matrix> {
    let n = skew.rows();
    if skew.cols() != n {
        return Err(shape_err("square skew matrix", format!("{}x{}", n, skew.cols())));
    }
    let s = skew.to_nalgebra();
    let asym = (&s + s.transpose()).amax();
    if asym > 1e-12 * s.amax().max(1.0) {
        return Err(BdqError::Parameter(format!("matrix is not skew-symmetric (|S + S^T| = {asym:e})")));
    }
    let eye = DMatrix::<f64>::identity(n, n);
    // (I + S) is invertible for every real skew-symmetric S.
    let inv = (&eye + &s)
        .try_inverse()
        .expect("I + S is nonsingular for skew-symmetric S");
    Ok(Matrix::from_nalgebra(&((&eye - &s) * inv)))
}

/// Seeded skew-symmetric matrix with entries of standard deviation `scale`.
pub fn random_skew(n: usize, seed: u64, scale: f64) -> Matrix {
    let g = gaussian_matrix(&mut rng_from_seed(seed), n, n, scale);
    Matrix::from_fn(n, n, |r, c| (g[(r, c)] - g[(c, r)]) / std::f64::consts::SQRT_2)
}

/// How a rotation was built.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RotationMeta {
    pub seed: Option<u64>,
    pub with_hadamard: bool,
}

impl RotationMeta {
    pub const IDENTITY: RotationMeta = RotationMeta {
        seed: None,
        with_hadamard: false,
    };
}

/// `H C` with `C` the Cayley image of a seeded skew-symmetric matrix; just
/// `C` when `with_hadamard` is false.
pub fn random_rotation(n: usize, seed: u64, with_hadamard: bool) -> Result<Matrix> {
    if n == 0 {
        return Err(BdqError::Parameter("rotation order must be >= 1".into()));
    }
    let c = cayley(&random_skew(n, seed, 1.0 / (n as f64).sqrt()))?;
    if with_hadamard {
        hadamard(n)?.matmul(&c)
    } else {
        Ok(c)
    }
}

/// Rotation for an arbitrary order: Hadamard factor only when `n` is a power
/// of two.
pub fn rotation_for_dim(n: usize, seed: u64) -> Result<(Matrix, RotationMeta)> {
    let with_hadamard = n.is_power_of_two();
    Ok((
        random_rotation(n, seed, with_hadamard)?,
        RotationMeta {
            seed: Some(seed),
            with_hadamard,
        },
    ))
}

/// Diagonals and rotation inserted around a linear layer `y = x W` with
/// `x: batch x n`, `W: n x m`.
///
/// The layer computes `y = Q(x L1 R) Q(R^T L1^-1 W L2^-1) L2` where `L1`
/// scales the `n` input channels and `L2` the `m` output channels. `L2` is
/// undone on the output side, where a following layer can absorb it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransformPair {
    pub lambda1: Vec<f64>,
    pub lambda2: Vec<f64>,
    #[serde(skip)]
    pub rotation: Option<Matrix>,
    pub rotation_meta: RotationMeta,
    /// Where the rotation payload lives when serialized.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rotation_path: Option<String>,
}

impl TransformPair {
    pub fn identity(n: usize, m: usize) -> Self {
        Self {
            lambda1: vec![1.0; n],
            lambda2: vec![1.0; m],
            rotation: None,
            rotation_meta: RotationMeta::IDENTITY,
            rotation_path: None,
        }
    }

    pub fn with_rotation(mut self, r: Matrix, meta: RotationMeta) -> Result<Self> {
        check_orthogonal(&r)?;
        if r.rows() != self.lambda1.len() {
            return Err(shape_err(format!("{0}x{0} rotation", self.lambda1.len()), format!("{}x{}", r.rows(), r.cols())));
        }
        self.rotation = Some(r);
        self.rotation_meta = meta;
        Ok(self)
    }

    /// Pair built from a flatness-optimal bidiagonal transform of `W`:
    /// `L1 = d1`, `L2 = d2`, so the quantized weight is the flattened matrix.
    pub fn from_bidiagonal(t: &BiDiagonalTransform) -> Self {
        Self {
            lambda1: t.d1.clone(),
            lambda2: t.d2.clone(),
            rotation: None,
            rotation_meta: RotationMeta::IDENTITY,
            rotation_path: None,
        }
    }

    pub fn in_dim(&self) -> usize {
        self.lambda1.len()
    }

    pub fn out_dim(&self) -> usize {
        self.lambda2.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.lambda1.iter().chain(&self.lambda2).any(|v| !(*v > 0.0 && v.is_finite())) {
            return Err(BdqError::Domain("transform diagonals must be positive".into()));
        }
        if let Some(r) = &self.rotation {
            if r.shape() != (self.in_dim(), self.in_dim()) {
                return Err(shape_err(
                    format!("{0}x{0} rotation", self.in_dim()),
                    format!("{}x{}", r.rows(), r.cols()),
                ));
            }
            check_orthogonal(r)?;
        }
        Ok(())
    }

    /// `x L1 R`.
    pub fn transform_input(&self, x: &Matrix) -> Result<Matrix> {
        let scaled = x.scale_cols(&self.lambda1)?;
        match &self.rotation {
            Some(r) => scaled.matmul(r),
            None => Ok(scaled),
        }
    }

    /// `R^T L1^-1 W L2^-1`.
    pub fn transform_weight(&self, w: &Matrix) -> Result<Matrix> {
        let t = BiDiagonalTransform {
            d1: self.lambda1.clone(),
            d2: self.lambda2.clone(),
        };
        let flat = apply_bidiagonal(w, &t, Direction::Flatten)?;
        match &self.rotation {
            Some(r) => r.transpose().matmul(&flat),
            None => Ok(flat),
        }
    }

    /// Inverse of [`Self::transform_weight`].
    pub fn restore_weight(&self, wt: &Matrix) -> Result<Matrix> {
        let unrotated = match &self.rotation {
            Some(r) => r.matmul(wt)?,
            None => wt.clone(),
        };
        let t = BiDiagonalTransform {
            d1: self.lambda1.clone(),
            d2: self.lambda2.clone(),
        };
        apply_bidiagonal(&unrotated, &t, Direction::Restore)
    }

    pub fn save(&self, json_path: impl AsRef<std::path::Path>) -> Result<()> {
        let json_path = json_path.as_ref();
        let mut out = self.clone();
        if let Some(r) = &self.rotation {
            let bin = json_path.with_extension("rot.bdq1");
            r.save_bdq1(&bin)?;
            out.rotation_path = bin.file_name().map(|s| s.to_string_lossy().into_owned());
        }
        std::fs::write(json_path, serde_json::to_vec_pretty(&out)?)?;
        Ok(())
    }

    pub fn load(json_path: impl AsRef<std::path::Path>) -> Result<Self> {
        let json_path = json_path.as_ref();
        let mut pair: TransformPair = serde_json::from_slice(&std::fs::read(json_path)?)?;
        if let Some(name) = &pair.rotation_path {
            let dir = json_path.parent().unwrap_or_else(|| std::path::Path::new("."));
            pair.rotation = Some(Matrix::load_bdq1(dir.join(name))?);
        }
        pair.validate()?;
        Ok(pair)
    }
}

pub fn check_orthogonal(r: &Matrix) -> Result<()> {
    if r.rows() != r.cols() {
        return Err(shape_err("square rotation", format!("{}x{}", r.rows(), r.cols())));
    }
    let defect = r.orthogonality_defect();
    if defect > ORTHOGONALITY_TOL {
        return Err(BdqError::NonOrthogonal(defect));
    }
    Ok(())
}

/// Quantizes a weight so that per-row granularity means one group per output
/// channel (column of `W` in `y = x W`).
pub fn quantize_weight(w: &Matrix, spec: &QuantSpec) -> Result<Matrix> {
    match spec.granularity {
        Granularity::PerTensor => fake_quantize(w, spec),
        Granularity::PerRow => Ok(fake_quantize(&w.transpose(), spec)?.transpose()),
    }
}

/// Straight-through backward pass of [`quantize_weight`].
pub fn quantize_weight_backward(w: &Matrix, spec: &QuantSpec, grad: &Matrix) -> Result<Matrix> {
    match spec.granularity {
        Granularity::PerTensor => fake_quantize_backward(w, spec, grad),
        Granularity::PerRow => Ok(fake_quantize_backward(&w.transpose(), spec, &grad.transpose())?.transpose()),
    }
}

/// Quantizes activations; per-row granularity is per token.
pub fn quantize_activation(x: &Matrix, spec: &QuantSpec) -> Result<Matrix> {
    fake_quantize(x, spec)
}

/// Forward pass of a linear layer with an inserted transform pair. Without a
/// quantization spec the output equals `x W` up to rounding.
pub fn apply_pair_forward(
    x: &Matrix,
    w: &Matrix,
    pair: &TransformPair,
    spec: Option<&QuantSpec>,
) -> Result<Matrix> {
    if x.cols() != w.rows() || pair.in_dim() != w.rows() || pair.out_dim() != w.cols() {
        return Err(shape_err(
            format!("x: b x {n}, W: {n} x {m}", n = pair.in_dim(), m = pair.out_dim()),
            format!("x: {}x{}, W: {}x{}", x.rows(), x.cols(), w.rows(), w.cols()),
        ));
    }
    pair.validate()?;
    let mut xt = pair.transform_input(x)?;
    let mut wt = pair.transform_weight(w)?;
    if let Some(spec) = spec {
        xt = quantize_activation(&xt, spec)?;
        wt = quantize_weight(&wt, spec)?;
    }
    xt.matmul(&wt)?.scale_cols(&pair.lambda2)
}

/// `P1 ⊗ P2` kept in factored form.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KroneckerTransform {
    pub p1: Matrix,
    pub p2: Matrix,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Side {
    /// `(P1 ⊗ P2) W`
    Left,
    /// `W (P1 ⊗ P2)`
    Right,
}

impl KroneckerTransform {
    pub fn new(p1: Matrix, p2: Matrix) -> Result<Self> {
        if p1.rows() != p1.cols() || p2.rows() != p2.cols() {
            return Err(BdqError::Parameter("Kronecker factors must be square".into()));
        }
        Ok(Self { p1, p2 })
    }

    pub fn identity(r: usize, s: usize) -> Self {
        Self {
            p1: Matrix::identity(r),
            p2: Matrix::identity(s),
        }
    }

    pub fn dim(&self) -> usize {
        self.p1.rows() * self.p2.rows()
    }

    pub fn param_count(&self) -> usize {
        self.p1.len() + self.p2.len()
    }

    fn transposed(&self) -> Self {
        Self {
            p1: self.p1.transpose(),
            p2: self.p2.transpose(),
        }
    }
}

/// Applies `P1 ⊗ P2` without materializing it: each length-`r s` vector is
/// viewed as an `r x s` block `X` and mapped to `P1^T X P2`.
pub fn kronecker_apply(w: &Matrix, kt: &KroneckerTransform, side: Side) -> Result<Matrix> {
    match side {
        Side::Right => kron_right(w, kt),
        Side::Left => Ok(kron_right(&w.transpose(), &kt.transposed())?.transpose()),
    }
}

fn kron_right(w: &Matrix, kt: &KroneckerTransform) -> Result<Matrix> {
    let (r, s) = (kt.p1.rows(), kt.p2.rows());
    if w.cols() != r * s {
        return Err(shape_err(format!("{} columns", r * s), format!("{}", w.cols())));
    }
    let p1t = kt.p1.transpose();
    let mut out = Vec::with_capacity(w.len());
    for row in 0..w.rows() {
        let block = Matrix::from_vec(r, s, w.row(row).to_vec());
        out.extend(p1t.matmul(&block)?.matmul(&kt.p2)?.into_vec());
    }
    Ok(Matrix::from_vec(w.rows(), w.cols(), out))
}

/// Elementwise `(P1 ⊗ P2) ∘ W`; `P1 ⊗ P2` must match `W`'s shape.
pub fn kronecker_mask(w: &Matrix, p1: &Matrix, p2: &Matrix) -> Result<Matrix> {
    let (r2, c2) = p2.shape();
    if p1.rows() * r2 != w.rows() || p1.cols() * c2 != w.cols() {
        return Err(shape_err(
            format!("{}x{}", w.rows(), w.cols()),
            format!("{}x{}", p1.rows() * r2, p1.cols() * c2),
        ));
    }
    Ok(Matrix::from_fn(w.rows(), w.cols(), |i, j| {
        p1[(i / r2, j / c2)] * p2[(i % r2, j % c2)] * w[(i, j)]
    }))
}

pub enum RankTransform<'a> {
    BiDiagonal(&'a BiDiagonalTransform),
    Kronecker(&'a KroneckerTransform, Side),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RankReport {
    pub rank_before: usize,
    pub rank_after: usize,
    pub preserved: bool,
    pub zero_pattern_preserved: bool,
}

/// Numerical rank before and after the transform.
pub fn rank_preservation_check(w: &Matrix, t: RankTransform<'_>) -> Result<RankReport> {
    let after = match t {
        RankTransform::BiDiagonal(d) => apply_bidiagonal(w, d, Direction::Flatten)?,
        RankTransform::Kronecker(k, side) => kronecker_apply(w, k, side)?,
    };
    let rank_before = w.numerical_rank();
    let rank_after = after.numerical_rank();
    let zero_pattern_preserved = w
        .as_slice()
        .iter()
        .zip(after.as_slice())
        .all(|(a, b)| (*a == 0.0) == (*b == 0.0));
    Ok(RankReport {
        rank_before,
        rank_after,
        preserved: rank_before == rank_after,
        zero_pattern_preserved,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GramReport {
    /// Max deviation between the sorted eigenvalues of `Gram(V1)` and `Gram(V1 R)`.
    pub eigenvalue_deviation: f64,
    /// `max |Gram(V1 R) - R^T Gram(V1) R|`.
    pub similarity_defect: f64,
    pub frobenius_before: f64,
    pub frobenius_after: f64,
    /// Largest off-diagonal magnitude of `Gram(V1 R)`.
    pub max_offdiag_after: f64,
    /// Entropy of the squared-entry energy distribution.
    pub entropy_before: f64,
    pub entropy_after: f64,
}

fn gram(v: &Matrix) -> Matrix {
    v.transpose().matmul(v).expect("conformable")
}

fn sorted_eigenvalues(g: &Matrix) -> Vec<f64> {
    let mut ev: Vec<f64> = SymmetricEigen::new(g.to_nalgebra()).eigenvalues.iter().copied().collect();
    ev.sort_by(f64::total_cmp);
    ev
}

fn energy_entropy(v: &Matrix) -> Result<f64> {
    shannon_entropy(&v.as_slice().iter().map(|x| x * x).collect::<Vec<_>>())
}

/// Column Gram matrix, spectrum and energy entropy of `V1` versus `V1 R`.
pub fn gram_spectrum_check(v1: &Matrix, r: &Matrix) -> Result<GramReport> {
    check_orthogonal(r)?;
    let v2 = v1.matmul(r)?;
    let g1 = gram(v1);
    let g2 = gram(&v2);
    let similar = r.transpose().matmul(&g1)?.matmul(r)?;
    let e1 = sorted_eigenvalues(&g1);
    let e2 = sorted_eigenvalues(&g2);
    let eigenvalue_deviation = e1.iter().zip(&e2).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    let n = g2.rows();
    let max_offdiag_after = (0..n)
        .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
        .map(|(i, j)| g2[(i, j)].abs())
        .fold(0.0, f64::max);
    Ok(GramReport {
        eigenvalue_deviation,
        similarity_defect: g2.max_abs_diff(&similar)?,
        frobenius_before: v1.frobenius_norm(),
        frobenius_after: v2.frobenius_norm(),
        max_offdiag_after,
        entropy_before: energy_entropy(v1)?,
        entropy_after: energy_entropy(&v2)?,
    })
}

/// Gradient-descent settings for the Kronecker baseline.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KronFitConfig {
    pub step: f64,
    pub iterations: usize,
}

impl Default for KronFitConfig {
    fn default() -> Self {
        Self {
            step: 1e-2,
            iterations: 2000,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BudgetReport {
    pub outliers: usize,
    pub diag_params: usize,
    pub kron_params: usize,
    /// `sum_{(i,j) in S} W_hat_ij^2` after the closed-form diagonal scaling.
    pub diag_residual: f64,
    /// Same quantity after the fitted Kronecker mask.
    pub kron_residual: f64,
    /// Final Kronecker objective value.
    pub kron_objective: f64,
    pub kron_iterations: usize,
}

/// Per-outlier closed form: `d1[i] = d2[j] = sqrt|W_ij|` for every outlier
/// `(i, j)`, all other scales 1.
pub fn outlier_suppression_diagonal(w: &Matrix, outliers: &[(usize, usize)]) -> Result<BiDiagonalTransform> {
    let mut t = BiDiagonalTransform::identity(w.rows(), w.cols());
    for &(i, j) in outliers {
        if i >= w.rows() || j >= w.cols() {
            return Err(BdqError::Parameter(format!("outlier ({i}, {j}) outside {}x{}", w.rows(), w.cols())));
        }
        let mag = w[(i, j)].abs();
        if mag == 0.0 {
            return Err(BdqError::Parameter(format!("outlier ({i}, {j}) is zero")));
        }
        t.d1[i] = mag.sqrt();
        t.d2[j] = mag.sqrt();
    }
    Ok(t)
}

fn outlier_energy(w: &Matrix, outliers: &[(usize, usize)]) -> f64 {
    outliers.iter().map(|&(i, j)| w[(i, j)].powi(2)).sum()
}

/// Fits a Kronecker mask `exp(-(A ⊕ B))`, `A: r x r`, `B: s x s`, on a
/// `(r s) x (r s)` matrix by plain gradient descent on
/// `sum_S W_hat^2 / sum_S W^2 + mean_{not S} (ln M)^2`.
///
/// The second term keeps non-outlier entries at their original scale; without
/// it the outlier energy is driven to zero by shrinking everything.
pub fn fit_kronecker_mask(
    w: &Matrix,
    outliers: &[(usize, usize)],
    r: usize,
    s: usize,
    cfg: &KronFitConfig,
) -> Result<(KroneckerTransform, f64)> {
    let n = r * s;
    if w.shape() != (n, n) {
        return Err(BdqError::Parameter(format!(
            "infeasible factorization: {r}x{r} ⊗ {s}x{s} cannot act on {}x{}",
            w.rows(),
            w.cols()
        )));
    }
    let mut is_outlier = vec![false; n * n];
    for &(i, j) in outliers {
        is_outlier[i * n + j] = true;
    }
    let normal_count = (n * n - outliers.len()).max(1) as f64;
    let base = outlier_energy(w, outliers).max(f64::MIN_POSITIVE);
    let mut a = vec![0.0f64; r * r];
    let mut b = vec![0.0f64; s * s];
    let mut objective = 0.0;
    for _ in 0..cfg.iterations {
        let mut ga = vec![0.0; r * r];
        let mut gb = vec![0.0; s * s];
        objective = 0.0;
        for i in 0..n {
            for j in 0..n {
                let ia = (i / s) * r + j / s;
                let ib = (i % s) * s + j % s;
                let l = a[ia] + b[ib];
                let g = if is_outlier[i * n + j] {
                    let e = (-2.0 * l).exp() * w[(i, j)].powi(2) / base;
                    objective += e;
                    -2.0 * e
                } else {
                    objective += l * l / normal_count;
                    2.0 * l / normal_count
                };
                ga[ia] += g;
                gb[ib] += g;
            }
        }
        a.iter_mut().zip(&ga).for_each(|(p, g)| *p -= cfg.step * g);
        b.iter_mut().zip(&gb).for_each(|(p, g)| *p -= cfg.step * g);
    }
    let p1 = Matrix::from_vec(r, r, a.iter().map(|v| (-v).exp()).collect());
    let p2 = Matrix::from_vec(s, s, b.iter().map(|v| (-v).exp()).collect());
    Ok((KroneckerTransform { p1, p2 }, objective))
}

/// Residual outlier energy under equal parameter budgets: closed-form
/// diagonal scaling versus a fitted Kronecker mask with `r^2 + s^2` entries.
pub fn budget_comparison(
    w: &Matrix,
    outliers: &[(usize, usize)],
    r: usize,
    s: usize,
    cfg: &KronFitConfig,
) -> Result<BudgetReport> {
    let diag_params = w.rows() + w.cols();
    let kron_params = r * r + s * s;
    if diag_params != kron_params {
        return Err(BdqError::Parameter(format!(
            "infeasible factorization: budgets differ ({diag_params} vs {kron_params})"
        )));
    }
    let t = outlier_suppression_diagonal(w, outliers)?;
    let diag = apply_bidiagonal(w, &t, Direction::Flatten)?;
    let (kt, kron_objective) = fit_kronecker_mask(w, outliers, r, s, cfg)?;
    let kron = kronecker_mask(w, &kt.p1, &kt.p2)?;
    Ok(BudgetReport {
        outliers: outliers.len(),
        diag_params,
        kron_params,
        diag_residual: outlier_energy(&diag, outliers),
        kron_residual: outlier_energy(&kron, outliers),
        kron_objective,
        kron_iterations: cfg.iterations,
    })
}
