//! Uniform affine quantization, dequantization, residual statistics and
//! bin-occupancy uniformity.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{shape_err, BdqError, Result};
use crate::numerics::{shannon_entropy, Matrix};

/// Magic bytes of the integer-code payload.
pub const BDQI_MAGIC: &[u8; 4] = b"BDQI";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QuantMode {
    /// `delta = max|w| / (2^b - 1)`; zero point `2^(b-1)` when the group holds
    /// negative values, `0` otherwise. Codes are unsigned.
    PaperMaxAbs,
    /// `delta = (hi - lo) / (2^b - 1)` over a range widened to contain zero.
    MinMaxAffine,
    /// `delta = max|w| / (2^(b-1) - 1)`, zero point 0, signed codes.
    SymmetricSigned,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Granularity {
    PerTensor,
    PerRow,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QuantSpec {
    pub bits: u32,
    pub mode: QuantMode,
    pub granularity: Granularity,
    /// Values are clamped to `[-clip, clip]` before the scale is computed.
    pub clip: Option<f64>,
}

impl QuantSpec {
    pub fn new(bits: u32, mode: QuantMode, granularity: Granularity) -> Result<Self> {
        let spec = Self {
            bits,
            mode,
            granularity,
            clip: None,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn with_clip(mut self, clip: f64) -> Result<Self> {
        self.clip = Some(clip);
        self.validate()?;
        Ok(self)
    }

    pub fn validate(&self) -> Result<()> {
        if !(2..=16).contains(&self.bits) {
            return Err(BdqError::Parameter(format!("bits must lie in [2, 16], got {}", self.bits)));
        }
        if let Some(c) = self.clip {
            if !(c > 0.0 && c.is_finite()) {
                return Err(BdqError::Parameter(format!("clip must be > 0, got {c}")));
            }
        }
        Ok(())
    }

    pub fn levels(&self) -> u32 {
        1 << self.bits
    }

    /// Inclusive code range.
    pub fn code_range(&self) -> (i32, i32) {
        match self.mode {
            QuantMode::SymmetricSigned => {
                let half = 1i32 << (self.bits - 1);
                (-half, half - 1)
            }
            QuantMode::PaperMaxAbs | QuantMode::MinMaxAffine => (0, (1i32 << self.bits) - 1),
        }
    }
}

/// Integer codes plus per-group affine parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantizedTensor {
    pub rows: usize,
    pub cols: usize,
    pub codes: Vec<i32>,
    pub scales: Vec<f64>,
    pub zero_points: Vec<i32>,
    /// Groups that were all zero and received `delta = 1`.
    pub degenerate: Vec<bool>,
    pub spec: QuantSpec,
}

impl QuantizedTensor {
    fn group_of(&self, row: usize) -> usize {
        match self.spec.granularity {
            Granularity::PerTensor => 0,
            Granularity::PerRow => row,
        }
    }

    pub fn any_degenerate(&self) -> bool {
        self.degenerate.iter().any(|&d| d)
    }

    pub fn header(&self) -> QuantHeader {
        QuantHeader {
            spec: self.spec,
            shape: [self.rows, self.cols],
            scales: self.scales.clone(),
            zero_points: self.zero_points.clone(),
            degenerate: self.degenerate.clone(),
        }
    }

    pub fn write_codes<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(BDQI_MAGIC)?;
        w.write_all(&(self.rows as u32).to_le_bytes())?;
        w.write_all(&(self.cols as u32).to_le_bytes())?;
        for c in &self.codes {
            w.write_all(&c.to_le_bytes())?;
        }
        Ok(())
    }

    /// Writes the code payload to `path` and the JSON header next to it with
    /// a `.json` extension.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut buf = Vec::with_capacity(12 + 4 * self.codes.len());
        self.write_codes(&mut buf)?;
        std::fs::write(path, buf)?;
        std::fs::write(path.with_extension("json"), serde_json::to_vec_pretty(&self.header())?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let header: QuantHeader = serde_json::from_slice(&std::fs::read(path.with_extension("json"))?)?;
        let bytes = std::fs::read(path)?;
        Self::from_parts(header, &bytes[..])
    }

    pub fn from_parts<R: Read>(header: QuantHeader, mut r: R) -> Result<Self> {
        header.spec.validate()?;
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != BDQI_MAGIC {
            return Err(BdqError::Format(format!("bad magic {magic:?}, expected BDQI")));
        }
        let mut b4 = [0u8; 4];
        r.read_exact(&mut b4)?;
        let rows = u32::from_le_bytes(b4) as usize;
        r.read_exact(&mut b4)?;
        let cols = u32::from_le_bytes(b4) as usize;
        if [rows, cols] != header.shape {
            return Err(BdqError::Format(format!(
                "payload shape {rows}x{cols} disagrees with header {:?}",
                header.shape
            )));
        }
        let mut codes = Vec::with_capacity(rows * cols);
        for _ in 0..rows * cols {
            r.read_exact(&mut b4)?;
            codes.push(i32::from_le_bytes(b4));
        }
        let (lo, hi) = header.spec.code_range();
        if codes.iter().any(|c| !(lo..=hi).contains(c)) {
            return Err(BdqError::Format("code outside the spec's range".into()));
        }
        let groups = match header.spec.granularity {
            Granularity::PerTensor => 1,
            Granularity::PerRow => rows,
        };
        if header.scales.len() != groups || header.zero_points.len() != groups {
            return Err(BdqError::Format("group parameter count mismatch".into()));
        }
        if header.scales.iter().any(|s| !(*s > 0.0)) {
            return Err(BdqError::Format("non-positive scale".into()));
        }
        let degenerate = if header.degenerate.len() == groups {
            header.degenerate
        } else {
            vec![false; groups]
        };
        Ok(Self {
            rows,
            cols,
            codes,
            scales: header.scales,
            zero_points: header.zero_points,
            degenerate,
            spec: header.spec,
        })
    }
}

/// JSON side of a serialized [`QuantizedTensor`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuantHeader {
    pub spec: QuantSpec,
    pub shape: [usize; 2],
    pub scales: Vec<f64>,
    pub zero_points: Vec<i32>,
    #[serde(default)]
    pub degenerate: Vec<bool>,
}

struct GroupParams {
    scale: f64,
    zero_point: i32,
    degenerate: bool,
}

fn group_params(values: &[f64], spec: &QuantSpec) -> GroupParams {
    let max_code = ((1u64 << spec.bits) - 1) as f64;
    let abs_max = values.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if abs_max == 0.0 {
        return GroupParams {
            scale: 1.0,
            zero_point: 0,
            degenerate: true,
        };
    }
    match spec.mode {
        QuantMode::PaperMaxAbs => {
            let signed = values.iter().any(|&v| v < 0.0);
            GroupParams {
                scale: abs_max / max_code,
                zero_point: if signed { 1 << (spec.bits - 1) } else { 0 },
                degenerate: false,
            }
        }
        QuantMode::MinMaxAffine => {
            let lo = values.iter().fold(0.0f64, |m, &v| m.min(v));
            let hi = values.iter().fold(0.0f64, |m, &v| m.max(v));
            let scale = (hi - lo) / max_code;
            GroupParams {
                scale,
                zero_point: (-lo / scale).round() as i32,
                degenerate: false,
            }
        }
        QuantMode::SymmetricSigned => {
            let half = ((1u64 << (spec.bits - 1)) - 1) as f64;
            GroupParams {
                scale: abs_max / half,
                zero_point: 0,
                degenerate: false,
            }
        }
    }
}

/// Quantizes `w` under `spec`. Codes are `round(w / delta) + z`, rounded half
/// away from zero and clamped to the code range.
pub fn quantize(w: &Matrix, spec: &QuantSpec) -> Result<QuantizedTensor> {
    spec.validate()?;
    let clipped;
    let src = match spec.clip {
        Some(c) => {
            clipped = w.map(|v| v.clamp(-c, c));
            &clipped
        }
        None => w,
    };
    let (rows, cols) = src.shape();
    let groups: Vec<&[f64]> = match spec.granularity {
        Granularity::PerTensor => vec![src.as_slice()],
        Granularity::PerRow => (0..rows).map(|r| src.row(r)).collect(),
    };
    let (lo, hi) = spec.code_range();
    let mut codes = Vec::with_capacity(rows * cols);
    let mut scales = Vec::with_capacity(groups.len());
    let mut zero_points = Vec::with_capacity(groups.len());
    let mut degenerate = Vec::with_capacity(groups.len());
    for g in &groups {
        let p = group_params(g, spec);
        scales.push(p.scale);
        zero_points.push(p.zero_point);
        degenerate.push(p.degenerate);
    }
    for r in 0..rows {
        let g = match spec.granularity {
            Granularity::PerTensor => 0,
            Granularity::PerRow => r,
        };
        let (scale, z) = (scales[g], zero_points[g] as i64);
        for &v in src.row(r) {
            // f64::round is half-away-from-zero.
            let code = (v / scale).round() as i64 + z;
            codes.push(code.clamp(lo as i64, hi as i64) as i32);
        }
    }
    Ok(QuantizedTensor {
        rows,
        cols,
        codes,
        scales,
        zero_points,
        degenerate,
        spec: *spec,
    })
}

/// `w' = (code - z) * delta` per group.
pub fn dequantize(q: &QuantizedTensor) -> Matrix {
    let mut data = Vec::with_capacity(q.codes.len());
    for r in 0..q.rows {
        let g = q.group_of(r);
        let (scale, z) = (q.scales[g], q.zero_points[g]);
        data.extend(
            q.codes[r * q.cols..(r + 1) * q.cols]
                .iter()
                .map(|&c| (c - z) as f64 * scale),
        );
    }
    Matrix::from_vec(q.rows, q.cols, data)
}

/// Quantize then dequantize.
pub fn fake_quantize(w: &Matrix, spec: &QuantSpec) -> Result<Matrix> {
    Ok(dequantize(&quantize(w, spec)?))
}

/// Backward pass of [`fake_quantize`] with the rounding step treated as the
/// identity. Gradient flows directly to each unsaturated, unclipped entry and
/// through the group scale to the entries that set it.
pub fn fake_quantize_backward(w: &Matrix, spec: &QuantSpec, grad: &Matrix) -> Result<Matrix> {
    if grad.shape() != w.shape() {
        return Err(shape_err(
            format!("{}x{}", w.rows(), w.cols()),
            format!("{}x{}", grad.rows(), grad.cols()),
        ));
    }
    let q = quantize(w, spec)?;
    let clip = spec.clip.unwrap_or(f64::INFINITY);
    let max_code = ((1u64 << spec.bits) - 1) as f64;
    let half = ((1u64 << (spec.bits - 1)) - 1) as f64;
    let (lo_code, hi_code) = spec.code_range();
    let (rows, cols) = w.shape();
    let group_rows: Vec<std::ops::Range<usize>> = match spec.granularity {
        Granularity::PerTensor => vec![0..rows],
        Granularity::PerRow => (0..rows).map(|r| r..r + 1).collect(),
    };
    let mut out = vec![0.0; rows * cols];
    for (g, range) in group_rows.into_iter().enumerate() {
        let (scale, z) = (q.scales[g], q.zero_points[g]);
        let span = range.start * cols..range.end * cols;
        let mut scale_grad = 0.0;
        let (mut arg_abs, mut arg_lo, mut arg_hi) = (None::<usize>, None::<usize>, None::<usize>);
        let (mut best_abs, mut best_lo, mut best_hi) = (0.0f64, 0.0f64, 0.0f64);
        for k in span.clone() {
            let v = w.as_slice()[k];
            let clipped = v.abs() > clip;
            let src = v.clamp(-clip, clip);
            let code = q.codes[k];
            let g_out = grad.as_slice()[k];
            let exact = (src / scale).round() as i64 + z as i64;
            let in_range = exact >= lo_code as i64 && exact <= hi_code as i64;
            if !clipped && in_range {
                out[k] = g_out;
            }
            // dQ/d(scale) = code - z - src/scale inside the range, code - z when saturated
            scale_grad += g_out * ((code - z) as f64 - if in_range { src / scale } else { 0.0 });
            if src.abs() > best_abs {
                best_abs = src.abs();
                arg_abs = Some(k);
            }
            if src < best_lo {
                best_lo = src;
                arg_lo = Some(k);
            }
            if src > best_hi {
                best_hi = src;
                arg_hi = Some(k);
            }
        }
        if q.degenerate[g] {
            continue;
        }
        // an extreme sitting at the clip level fixes the scale
        let free = |k: &usize| w.as_slice()[*k].abs() < clip;
        match spec.mode {
            QuantMode::PaperMaxAbs | QuantMode::SymmetricSigned => {
                let denom = if spec.mode == QuantMode::PaperMaxAbs { max_code } else { half };
                if let Some(k) = arg_abs.filter(free) {
                    out[k] += scale_grad * w.as_slice()[k].signum() / denom;
                }
            }
            QuantMode::MinMaxAffine => {
                if let Some(k) = arg_hi.filter(free) {
                    out[k] += scale_grad / max_code;
                }
                if let Some(k) = arg_lo.filter(free) {
                    out[k] -= scale_grad / max_code;
                }
            }
        }
    }
    Ok(Matrix::from_vec(rows, cols, out))
}

/// Statistics of the residual `(W - dequantize(q)) x`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ResidualStats {
    pub mean: f64,
    pub mse: f64,
    pub max_abs: f64,
    pub degenerate: bool,
}

/// Residual statistics of `(W - W') x`. A `1x1` `x` acts as a scalar input
/// magnitude.
pub fn quant_error(w: &Matrix, q: &QuantizedTensor, x: &Matrix) -> Result<ResidualStats> {
    if w.shape() != (q.rows, q.cols) {
        return Err(shape_err(
            format!("{}x{}", q.rows, q.cols),
            format!("{}x{}", w.rows(), w.cols()),
        ));
    }
    let diff = w.sub(&dequantize(q))?;
    let residual = if x.shape() == (1, 1) {
        diff.scale(x[(0, 0)])
    } else {
        diff.matmul(x)?
    };
    let n = residual.len().max(1) as f64;
    Ok(ResidualStats {
        mean: residual.as_slice().iter().sum::<f64>() / n,
        mse: residual.mean_square(),
        max_abs: residual.max_abs(),
        degenerate: q.any_degenerate(),
    })
}

/// Histogram over every code level plus its normalized entropy.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BinOccupancy {
    /// `histogram[i]` counts code `code_range().0 + i`.
    pub histogram: Vec<u64>,
    pub uniformity: f64,
}

pub fn bin_occupancy(q: &QuantizedTensor) -> Result<BinOccupancy> {
    if q.codes.is_empty() {
        return Err(BdqError::Parameter("no codes to histogram".into()));
    }
    let (lo, hi) = q.spec.code_range();
    let mut histogram = vec![0u64; (hi - lo + 1) as usize];
    for &c in &q.codes {
        histogram[(c - lo) as usize] += 1;
    }
    let weights: Vec<f64> = histogram.iter().map(|&c| c as f64).collect();
    let uniformity = shannon_entropy(&weights)? / (histogram.len() as f64).ln();
    Ok(BinOccupancy {
        histogram,
        uniformity,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{gaussian_matrix, rng_from_seed};
    use proptest::prelude::*;

    fn spec(bits: u32, mode: QuantMode) -> QuantSpec {
        QuantSpec::new(bits, mode, Granularity::PerTensor).unwrap()
    }

    fn row(v: &[f64]) -> Matrix {
        Matrix::row_vector(v).unwrap()
    }

    #[test]
    fn grid_aligned_exact() {
        let w = row(&[0.0, 5.0, 10.0, 15.0]);
        let q = quantize(&w, &spec(2, QuantMode::PaperMaxAbs)).unwrap();
        assert_eq!(q.scales, vec![5.0]);
        assert_eq!(q.codes, vec![0, 1, 2, 3]);
        assert_eq!(dequantize(&q), w);
    }

    #[test]
    fn small_values_collapse_next_to_outlier() {
        let w = row(&[0.1, 0.2, 0.3, 15.0]);
        let q = quantize(&w, &spec(2, QuantMode::PaperMaxAbs)).unwrap();
        assert_eq!(q.scales, vec![5.0]);
        assert_eq!(q.codes, vec![0, 0, 0, 3]);
        assert_eq!(dequantize(&q).as_slice(), &[0.0, 0.0, 0.0, 15.0]);
        let stats = quant_error(&w, &q, &row(&[1.0])).unwrap();
        // (0.01 + 0.04 + 0.09) / 4
        assert!((stats.mse - 0.035).abs() < 1e-15);
    }

    #[test]
    fn four_bit_integers_exact() {
        let w = row(&[1.0, 2.0, 3.0, 15.0]);
        let q = quantize(&w, &spec(4, QuantMode::PaperMaxAbs)).unwrap();
        assert_eq!(q.scales, vec![1.0]);
        let stats = quant_error(&w, &q, &row(&[1.0])).unwrap();
        assert_eq!((stats.mse, stats.max_abs, stats.mean), (0.0, 0.0, 0.0));
    }

    #[test]
    fn signed_max_abs_mode_uses_midpoint_zero() {
        let w = row(&[-1.0, 0.0, 1.0]);
        let q = quantize(&w, &spec(4, QuantMode::PaperMaxAbs)).unwrap();
        assert_eq!(q.zero_points, vec![8]);
        assert!(q.codes.iter().all(|&c| (0..=15).contains(&c)));
    }

    #[test]
    fn rounding_is_half_away_from_zero() {
        // delta = 1: 0.5 -> 1, -0.5 -> -1, 2.5 -> 3
        let w = row(&[0.5, -0.5, 2.5, -7.0]);
        let q = quantize(&w, &spec(4, QuantMode::SymmetricSigned)).unwrap();
        assert_eq!(q.scales, vec![1.0]);
        assert_eq!(q.codes, vec![1, -1, 3, -7]);
    }

    #[test]
    fn all_zero_group_is_flagged() {
        let w = Matrix::from_rows(&[vec![0.0, 0.0], vec![1.0, -2.0]]).unwrap();
        let s = QuantSpec::new(4, QuantMode::PaperMaxAbs, Granularity::PerRow).unwrap();
        let q = quantize(&w, &s).unwrap();
        assert_eq!(q.degenerate, vec![true, false]);
        assert_eq!(q.scales[0], 1.0);
        assert_eq!(&q.codes[..2], &[q.zero_points[0]; 2]);
        assert!(quant_error(&w, &q, &row(&[1.0])).unwrap().degenerate);
    }

    #[test]
    fn codes_at_zero_point_dequantize_to_zero() {
        let w = row(&[-3.0, 1.0, 2.0]);
        let mut q = quantize(&w, &spec(4, QuantMode::MinMaxAffine)).unwrap();
        q.codes = vec![q.zero_points[0]; 3];
        assert_eq!(dequantize(&q), Matrix::zeros(1, 3));
    }

    #[test]
    fn clip_bounds_values() {
        let w = row(&[-100.0, 0.3, 100.0]);
        let s = spec(4, QuantMode::SymmetricSigned).with_clip(4.0).unwrap();
        let dq = fake_quantize(&w, &s).unwrap();
        assert!(dq.max_abs() <= 4.0 + 1e-12);
        assert!(QuantSpec::new(4, QuantMode::SymmetricSigned, Granularity::PerTensor)
            .unwrap()
            .with_clip(0.0)
            .is_err());
    }

    #[test]
    fn invalid_bits() {
        assert!(QuantSpec::new(1, QuantMode::PaperMaxAbs, Granularity::PerTensor).is_err());
        assert!(QuantSpec::new(17, QuantMode::PaperMaxAbs, Granularity::PerTensor).is_err());
    }

    #[test]
    fn quant_error_shapes() {
        let w = Matrix::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap();
        let q = quantize(&w, &spec(8, QuantMode::SymmetricSigned)).unwrap();
        assert!(quant_error(&w, &q, &Matrix::zeros(3, 1)).is_err());
        let via_identity = quant_error(&w, &q, &Matrix::identity(2)).unwrap();
        let scalar = quant_error(&w, &q, &row(&[1.0])).unwrap();
        assert!((via_identity.mse - scalar.mse).abs() < 1e-18);
        let one = row(&[0.3]);
        let q1 = quantize(&one, &spec(2, QuantMode::SymmetricSigned)).unwrap();
        assert_eq!(dequantize(&q1).as_slice(), &[0.3]);
    }

    #[test]
    fn single_entry_residual() {
        // delta = 15/15 = 1 from the max entry; 2.4 rounds to 2.
        let w = row(&[2.4, 15.0]);
        let q = quantize(&w, &spec(4, QuantMode::PaperMaxAbs)).unwrap();
        let stats = quant_error(&w, &q, &row(&[2.0])).unwrap();
        let expected = ((0.4f64 * 2.0).powi(2) + 0.0) / 2.0;
        assert!((stats.mse - expected).abs() < 1e-14);
        assert!((stats.max_abs - 0.8).abs() < 1e-14);
    }

    #[test]
    fn occupancy_extremes() {
        let s = spec(2, QuantMode::PaperMaxAbs);
        let q = quantize(&row(&[0.0, 1.0, 2.0, 3.0]), &s).unwrap();
        let occ = bin_occupancy(&q).unwrap();
        assert_eq!(occ.histogram, vec![1, 1, 1, 1]);
        assert!((occ.uniformity - 1.0).abs() < 1e-15);
        let q = quantize(&row(&[3.0, 3.0, 3.0]), &s).unwrap();
        assert_eq!(bin_occupancy(&q).unwrap().uniformity, 0.0);
    }

    #[test]
    fn serialization_round_trip() {
        let mut rng = rng_from_seed(5);
        let w = gaussian_matrix(&mut rng, 3, 7, 2.0);
        let s = QuantSpec::new(5, QuantMode::SymmetricSigned, Granularity::PerRow).unwrap();
        let q = quantize(&w, &s).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("w.bdqi");
        q.save(&path).unwrap();
        assert_eq!(QuantizedTensor::load(&path).unwrap(), q);
        let bytes = std::fs::read(&path).unwrap();
        assert_eq!(&bytes[..4], b"BDQI");
    }

    fn modes() -> impl Strategy<Value = QuantMode> {
        prop_oneof![
            Just(QuantMode::PaperMaxAbs),
            Just(QuantMode::MinMaxAffine),
            Just(QuantMode::SymmetricSigned)
        ]
    }

    /// `sum_k g_k (w_k + scale(w) r_k)` with the rounding residuals `r` frozen
    /// at `base`: its exact gradient is what the backward pass should return.
    fn frozen_residual_objective(base: &Matrix, w: &Matrix, spec: &QuantSpec, g: &Matrix) -> f64 {
        let q0 = quantize(base, spec).unwrap();
        let q = quantize(w, spec).unwrap();
        let (lo, hi) = spec.code_range();
        let mut total = 0.0;
        for r in 0..w.rows() {
            let gi = q0.group_of(r);
            let (s0, z0) = (q0.scales[gi], q0.zero_points[gi]);
            let s = q.scales[q.group_of(r)];
            for c in 0..w.cols() {
                let k = r * w.cols() + c;
                let b = base.as_slice()[k];
                let code = q0.codes[k];
                let exact = (b / s0).round() as i64 + z0 as i64;
                let term = if exact >= lo as i64 && exact <= hi as i64 {
                    w.as_slice()[k] + s * ((code - z0) as f64 - b / s0)
                } else {
                    s * (code - z0) as f64
                };
                total += g.as_slice()[k] * term;
            }
        }
        total
    }

    #[test]
    fn backward_matches_frozen_residual_differences() {
        for (i, mode) in [QuantMode::SymmetricSigned, QuantMode::PaperMaxAbs, QuantMode::MinMaxAffine]
            .into_iter()
            .enumerate()
        {
            for gran in [Granularity::PerTensor, Granularity::PerRow] {
                let mut rng = rng_from_seed(40 + i as u64);
                let w = gaussian_matrix(&mut rng, 3, 5, 1.0);
                let g = gaussian_matrix(&mut rng, 3, 5, 1.0);
                let s = QuantSpec::new(4, mode, gran).unwrap();
                let analytic = fake_quantize_backward(&w, &s, &g).unwrap();
                let h = 1e-7;
                for k in 0..w.len() {
                    let mut up = w.clone();
                    up[(k / 5, k % 5)] += h;
                    let mut down = w.clone();
                    down[(k / 5, k % 5)] -= h;
                    let fd = (frozen_residual_objective(&w, &up, &s, &g) - frozen_residual_objective(&w, &down, &s, &g))
                        / (2.0 * h);
                    assert!((analytic.as_slice()[k] - fd).abs() < 1e-6, "{mode:?} {gran:?} entry {k}");
                }
            }
        }
    }

    #[test]
    fn backward_zero_outside_clip() {
        let w = Matrix::from_rows(&[vec![0.5, -3.0, 9.0, 1.0]]).unwrap();
        let s = spec(4, QuantMode::SymmetricSigned).with_clip(2.0).unwrap();
        let g = Matrix::from_rows(&[vec![1.0; 4]]).unwrap();
        let back = fake_quantize_backward(&w, &s, &g).unwrap();
        assert_eq!(back[(0, 1)], 0.0);
        assert_eq!(back[(0, 2)], 0.0);
        assert_eq!(back[(0, 0)], 1.0);
    }

    proptest! {
        #[test]
        fn codes_in_range(seed in any::<u64>(), bits in 2u32..=16, mode in modes(),
                          per_row in any::<bool>(), scale in 1e-3f64..1e3) {
            let g = if per_row { Granularity::PerRow } else { Granularity::PerTensor };
            let s = QuantSpec::new(bits, mode, g).unwrap();
            let w = gaussian_matrix(&mut rng_from_seed(seed), 4, 9, scale);
            let q = quantize(&w, &s).unwrap();
            let (lo, hi) = s.code_range();
            prop_assert!(q.codes.iter().all(|c| (lo..=hi).contains(c)));
            prop_assert!(q.scales.iter().all(|&d| d > 0.0));
        }

        #[test]
        fn unclipped_error_within_half_step(seed in any::<u64>(), bits in 2u32..=12) {
            // Nonnegative data never leaves the max-abs mode range.
            let w = gaussian_matrix(&mut rng_from_seed(seed), 1, 64, 1.0).map(f64::abs);
            let q = quantize(&w, &spec(bits, QuantMode::PaperMaxAbs)).unwrap();
            let d = dequantize(&q);
            let half = q.scales[0] / 2.0;
            for (a, b) in w.as_slice().iter().zip(d.as_slice()) {
                let slack = 4.0 * f64::EPSILON * a.abs().max(half);
                prop_assert!((a - b).abs() <= half + slack);
            }
        }

        #[test]
        fn requantize_is_idempotent(seed in any::<u64>(), bits in 2u32..=12,
                                    mode in prop_oneof![Just(QuantMode::SymmetricSigned), Just(QuantMode::MinMaxAffine)]) {
            let w = gaussian_matrix(&mut rng_from_seed(seed), 3, 16, 1.0);
            let s = QuantSpec::new(bits, mode, Granularity::PerRow).unwrap();
            let q = quantize(&w, &s).unwrap();
            let q2 = quantize(&dequantize(&q), &s).unwrap();
            prop_assert_eq!(q.codes, q2.codes);
        }

        #[test]
        fn per_row_equals_independent_rows(seed in any::<u64>(), bits in 2u32..=8, mode in modes()) {
            let w = gaussian_matrix(&mut rng_from_seed(seed), 5, 6, 1.0);
            let per_row = quantize(&w, &QuantSpec::new(bits, mode, Granularity::PerRow).unwrap()).unwrap();
            let s = spec(bits, mode);
            for r in 0..5 {
                let single = quantize(&row(w.row(r)), &s).unwrap();
                prop_assert_eq!(&per_row.codes[r * 6..(r + 1) * 6], &single.codes[..]);
                prop_assert_eq!(per_row.scales[r], single.scales[0]);
            }
        }
    }
}
