//! Toy network, CE / RCE losses with analytic gradients, and a calibration
//! loop that learns log-diagonal transform scales under quantization.

use std::io::Write;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{shape_err, BdqError, Result};
use crate::flatness::raw_flatness;
use crate::numerics::{gaussian_matrix, rng_from_seed, Matrix};
use crate::quantizer::{fake_quantize_backward, QuantSpec};
use crate::transforms::{
    cayley, quantize_activation, quantize_weight, quantize_weight_backward, rotation_for_dim, RotationMeta, TransformPair};

const SUM_TOL: f64 = 1e-9;

fn check_distribution(name: &str, v: &[f64]) -> Result<()> {
    if v.iter().any(|x| !(*x >= 0.0 && x.is_finite())) {
        return Err(BdqError::Domain(format!("{name} has negative or non-finite entries")));
    }
    let s: f64 = v.iter().sum();
    if (s - 1.0).abs() > SUM_TOL {
        return Err(BdqError::Domain(format!("{name} sums to {s}, not 1")));
    }
    Ok(())
}

fn check_pair(q: &[f64], p: &[f64]) -> Result<()> {
    if q.len() != p.len() {
        return Err(shape_err(format!("{} entries", q.len()), format!("{}", p.len())));
    }
    check_distribution("q", q)?;
    check_distribution("p", p)?;
    if q.iter().zip(p).any(|(&qi, &pi)| qi > 0.0 && pi == 0.0) {
        return Err(BdqError::Domain("p is zero where q is positive".into()));
    }
    Ok(())
}

fn check_delta(delta: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&delta) {
        return Err(BdqError::Parameter(format!("delta must lie in [0, 1], got {delta}")));
    }
    Ok(())
}

/// Numerically stable softmax of one row of logits.
pub fn softmax(z: &[f64]) -> Vec<f64> {
    let max = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = z.iter().map(|v| (v - max).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

/// `-sum q ln p`.
pub fn cross_entropy(q: &[f64], p: &[f64]) -> Result<f64> {
    check_pair(q, p)?;
    Ok(-q.iter().zip(p).filter(|(qi, _)| **qi > 0.0).map(|(qi, pi)| qi * pi.ln()).sum::<f64>())
}

/// `-sum p ln p`.
pub fn entropy(p: &[f64]) -> Result<f64> {
    check_distribution("p", p)?;
    Ok(-p.iter().filter(|v| **v > 0.0).map(|v| v * v.ln()).sum::<f64>())
}

/// Loss and gradient with respect to `p`. The mixture uses `reference` in
/// place of `p` when given, and is then treated as a constant.
fn rce_eval(q: &[f64], p: &[f64], reference: Option<&[f64]>, delta: f64) -> Result<(f64, Vec<f64>)> {
    check_pair(q, p)?;
    check_delta(delta)?;
    let mut loss = 0.0;
    let mut grad = Vec::with_capacity(p.len());
    for i in 0..p.len() {
        let (qi, pi) = (q[i], p[i]);
        let r = reference.map_or(pi, |r| r[i]);
        let m = delta * r + (1.0 - delta) * qi;
        let mut g = 0.0;
        if qi > 0.0 {
            loss -= qi * pi.ln();
            g -= qi / pi;
        }
        if pi > 0.0 {
            if m <= 0.0 {
                return Err(BdqError::Domain(format!("mixture is zero at index {i} where p > 0")));
            }
            loss += pi * m.ln();
        }
        if m > 0.0 {
            g += m.ln();
            if reference.is_none() {
                g += delta * pi / m;
            }
        } else if pi > 0.0 || reference.is_none() {
            return Err(BdqError::Domain(format!("mixture is zero at index {i}")));
        }
        grad.push(g);
    }
    Ok((loss, grad))
}

/// `-sum (q_i ln p_i - p_i ln(delta p_i + (1 - delta) q_i))`.
pub fn rce_loss(q: &[f64], p: &[f64], delta: f64) -> Result<f64> {
    check_pair(q, p)?;
    check_delta(delta)?;
    let mut loss = 0.0;
    for (i, (&qi, &pi)) in q.iter().zip(p).enumerate() {
        if qi > 0.0 {
            loss -= qi * pi.ln();
        }
        if pi > 0.0 {
            let m = delta * pi + (1.0 - delta) * qi;
            if m <= 0.0 {
                return Err(BdqError::Domain(format!("mixture is zero at index {i} where p > 0")));
            }
            loss += pi * m.ln();
        }
    }
    Ok(loss)
}

/// Gradient of [`rce_loss`] with respect to `p`, treating every `p_i` as free.
pub fn rce_gradient(q: &[f64], p: &[f64], delta: f64) -> Result<Vec<f64>> {
    Ok(rce_eval(q, p, None, delta)?.1)
}

/// Chain rule through `p = softmax(z)`: `dL/dz_j = p_j (g_j - sum_i p_i g_i)`.
pub fn softmax_backward(p: &[f64], grad_p: &[f64]) -> Vec<f64> {
    let dot: f64 = p.iter().zip(grad_p).map(|(a, b)| a * b).sum();
    p.iter().zip(grad_p).map(|(pi, gi)| pi * (gi - dot)).collect()
}

/// Gradient of `rce_loss(q, softmax(z), delta)` with respect to the logits.
pub fn rce_logit_gradient(q: &[f64], z: &[f64], delta: f64) -> Result<Vec<f64>> {
    let p = softmax(z);
    Ok(softmax_backward(&p, &rce_gradient(q, &p, delta)?))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    None,
    Relu,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Layer {
    /// `n x m`, applied as `y = x W`.
    pub weight: Matrix,
    pub activation: Activation,
}

/// Chain of linear layers, each wrapped in its own transform pair. The
/// weights are frozen; calibration only changes the pairs.
#[derive(Debug, Clone, PartialEq)]
pub struct ToyNetwork {
    pub layers: Vec<Layer>,
    pub pairs: Vec<TransformPair>,
}

impl ToyNetwork {
    pub fn new(layers: Vec<Layer>) -> Result<Self> {
        let pairs = layers
            .iter()
            .map(|l| TransformPair::identity(l.weight.rows(), l.weight.cols()))
            .collect();
        let net = Self { layers, pairs };
        net.validate()?;
        Ok(net)
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers.is_empty() {
            return Err(BdqError::Parameter("network has no layers".into()));
        }
        if self.pairs.len() != self.layers.len() {
            return Err(BdqError::Parameter(format!(
                "{} pairs for {} layers",
                self.pairs.len(),
                self.layers.len()
            )));
        }
        for w in self.layers.windows(2) {
            if w[0].weight.cols() != w[1].weight.rows() {
                return Err(shape_err(
                    format!("{} inputs", w[0].weight.cols()),
                    format!("{}", w[1].weight.rows()),
                ));
            }
        }
        for (l, p) in self.layers.iter().zip(&self.pairs) {
            if p.in_dim() != l.weight.rows() || p.out_dim() != l.weight.cols() {
                return Err(shape_err(
                    format!("{}x{} pair", l.weight.rows(), l.weight.cols()),
                    format!("{}x{}", p.in_dim(), p.out_dim()),
                ));
            }
            p.validate()?;
        }
        Ok(())
    }

    pub fn in_dim(&self) -> usize {
        self.layers[0].weight.rows()
    }

    pub fn out_dim(&self) -> usize {
        self.layers.last().map_or(0, |l| l.weight.cols())
    }

    pub fn with_pairs(&self, pairs: Vec<TransformPair>) -> Result<Self> {
        let net = Self {
            layers: self.layers.clone(),
            pairs,
        };
        net.validate()?;
        Ok(net)
    }

    /// Sets a seeded rotation on every pair, keeping the diagonals.
    pub fn with_rotations(&self, seed: u64) -> Result<Self> {
        let mut pairs = self.pairs.clone();
        for (i, p) in pairs.iter_mut().enumerate() {
            let (r, meta) = rotation_for_dim(p.in_dim(), seed.wrapping_add(i as u64))?;
            *p = p.clone().with_rotation(r, meta)?;
        }
        self.with_pairs(pairs)
    }

    /// Full-precision output of the untransformed network.
    pub fn teacher_forward(&self, x: &Matrix) -> Result<Matrix> {
        let mut h = x.clone();
        for l in &self.layers {
            h = activate(&h.matmul(&l.weight)?, l.activation);
        }
        Ok(h)
    }

    /// Output through the transform pairs, quantized when `spec` is given.
    pub fn forward(&self, x: &Matrix, spec: Option<&QuantSpec>) -> Result<Matrix> {
        let mut h = x.clone();
        for (l, p) in self.layers.iter().zip(&self.pairs) {
            h = activate(&crate::transforms::apply_pair_forward(&h, &l.weight, p, spec)?, l.activation);
        }
        Ok(h)
    }

    /// Seeded network with `N(0, 1/n)` weights and `outliers_per_layer`
    /// entries per layer replaced by `+-k / sqrt(n)`.
    pub fn planted(seed: u64, dims: &[usize], k: f64, outliers_per_layer: usize) -> Result<Self> {
        use rand::Rng;
        if dims.len() < 2 {
            return Err(BdqError::Parameter("need at least two layer widths".into()));
        }
        let mut rng = rng_from_seed(seed);
        let mut layers = Vec::with_capacity(dims.len() - 1);
        for (i, d) in dims.windows(2).enumerate() {
            let (n, m) = (d[0], d[1]);
            let sigma = 1.0 / (n as f64).sqrt();
            let mut w = gaussian_matrix(&mut rng, n, m, sigma);
            let mut idx: Vec<usize> = (0..n * m).collect();
            let (chosen, _) = idx.partial_shuffle(&mut rng, outliers_per_layer.min(n * m));
            for &flat in chosen.iter() {
                let sign = if rng.random::<bool>() { 1.0 } else { -1.0 };
                w[(flat / m, flat % m)] = sign * k * sigma;
            }
            let activation = if i + 2 < dims.len() { Activation::Relu } else { Activation::None };
            layers.push(Layer { weight: w, activation });
        }
        Self::new(layers)
    }
}

fn activate(h: &Matrix, act: Activation) -> Matrix {
    match act {
        Activation::None => h.clone(),
        Activation::Relu => h.map(|v| v.max(0.0)),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    Ce,
    Rce,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CalibrationConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    pub delta: f64,
    pub batch_size: usize,
    pub seed: u64,
    pub loss: LossKind,
    pub calib_set_size: usize,
    /// Decay of an exponential moving average of past predictions used inside
    /// the RCE mixture instead of the current `p`. Off when `None`.
    pub ema_decay: Option<f64>,
    /// Also learn the Cayley parameters of each rotation.
    pub learn_rotation: bool,
}

impl Default for CalibrationConfig {
    fn default() -> Self {
        Self {
            learning_rate: 5e-3,
            epochs: 200,
            delta: 0.5,
            batch_size: 128,
            seed: 0,
            loss: LossKind::Rce,
            calib_set_size: 128,
            ema_decay: None,
            learn_rotation: false,
        }
    }
}

impl CalibrationConfig {
    pub fn validate(&self) -> Result<()> {
        check_delta(self.delta)?;
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(BdqError::Parameter(format!("learning rate must be > 0, got {}", self.learning_rate)));
        }
        if self.batch_size == 0 || self.calib_set_size == 0 {
            return Err(BdqError::Parameter("batch and calibration set sizes must be >= 1".into()));
        }
        if let Some(d) = self.ema_decay {
            if !(0.0..1.0).contains(&d) {
                return Err(BdqError::Parameter(format!("ema decay must lie in [0, 1), got {d}")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub epoch: usize,
    pub train_loss: f64,
    pub heldout_loss: Option<f64>,
    /// Mean normalized Flatness of the transformed weights.
    pub mean_flatness: f64,
    /// Largest transformed-weight magnitude.
    pub max_abs_weight: f64,
    /// Max deviation of the unquantized transformed output from the teacher
    /// on the calibration set.
    pub output_deviation: f64,
}

pub const TRACE_COLUMNS: &str = "epoch,train_loss,heldout_loss,mean_flatness,max_abs_weight,output_deviation";

pub fn write_trace_csv<W: Write>(rows: &[TraceRow], mut w: W) -> Result<()> {
    writeln!(w, "{TRACE_COLUMNS}")?;
    for r in rows {
        let held = r.heldout_loss.map(|v| format!("{v:?}")).unwrap_or_default();
        writeln!(
            w,
            "{},{:?},{},{:?},{:?},{:?}",
            r.epoch, r.train_loss, held, r.mean_flatness, r.max_abs_weight, r.output_deviation
        )?;
    }
    Ok(())
}

#[derive(Debug, Clone)]
pub struct CalibrationOutcome {
    pub pairs: Vec<TransformPair>,
    /// Row 0 is the initial state; row `e` follows epoch `e`.
    pub trace: Vec<TraceRow>,
    /// Epoch at which the loss stopped being finite.
    pub diverged_at: Option<usize>,
}

impl CalibrationOutcome {
    /// Epoch with the lowest held-out loss.
    pub fn best_heldout_epoch(&self) -> Option<usize> {
        self.trace
            .iter()
            .filter_map(|r| r.heldout_loss.map(|h| (r.epoch, h)))
            .min_by(|a, b| a.1.total_cmp(&b.1))
            .map(|(e, _)| e)
    }
}

#[derive(Debug, Clone)]
struct LayerParams {
    log_l1: Vec<f64>,
    log_l2: Vec<f64>,
    base: Option<Matrix>,
    meta: RotationMeta,
    skew: Option<Matrix>,
}

impl LayerParams {
    fn from_pair(p: &TransformPair, learn_rotation: bool) -> Self {
        let n = p.in_dim();
        Self {
            log_l1: p.lambda1.iter().map(|v| v.ln()).collect(),
            log_l2: p.lambda2.iter().map(|v| v.ln()).collect(),
            base: p.rotation.clone(),
            meta: p.rotation_meta,
            skew: learn_rotation.then(|| Matrix::zeros(n, n)),
        }
    }

    fn rotation(&self) -> Result<Option<Matrix>> {
        match (&self.base, &self.skew) {
            (base, Some(s)) => {
                let c = cayley(s)?;
                Ok(Some(match base {
                    Some(b) => b.matmul(&c)?,
                    None => c,
                }))
            }
            (Some(b), None) => Ok(Some(b.clone())),
            (None, None) => Ok(None),
        }
    }

    fn to_pair(&self) -> Result<TransformPair> {
        Ok(TransformPair {
            lambda1: self.log_l1.iter().map(|v| v.exp()).collect(),
            lambda2: self.log_l2.iter().map(|v| v.exp()).collect(),
            rotation: self.rotation()?,
            rotation_meta: self.meta,
            rotation_path: None,
        })
    }
}

struct LayerCache {
    l1: Vec<f64>,
    l2: Vec<f64>,
    r: Option<Matrix>,
    s: Matrix,
    u: Matrix,
    uq: Matrix,
    m: Matrix,
    wt: Matrix,
    wq: Matrix,
    o: Matrix,
}

struct Grads {
    log_l1: Vec<f64>,
    log_l2: Vec<f64>,
    skew: Option<Matrix>,
}

fn forward_cached(
    net: &ToyNetwork,
    params: &[LayerParams],
    x: &Matrix,
    spec: Option<&QuantSpec>,
) -> Result<(Vec<LayerCache>, Matrix)> {
    let mut h = x.clone();
    let mut caches = Vec::with_capacity(params.len());
    for (layer, p) in net.layers.iter().zip(params) {
        let l1: Vec<f64> = p.log_l1.iter().map(|v| v.exp()).collect();
        let l2: Vec<f64> = p.log_l2.iter().map(|v| v.exp()).collect();
        let r = p.rotation()?;
        let s = h.scale_cols(&l1)?;
        let u = match &r {
            Some(r) => s.matmul(r)?,
            None => s.clone(),
        };
        let inv1: Vec<f64> = l1.iter().map(|v| 1.0 / v).collect();
        let inv2: Vec<f64> = l2.iter().map(|v| 1.0 / v).collect();
        let m = layer.weight.scale_rows(&inv1)?.scale_cols(&inv2)?;
        let wt = match &r {
            Some(r) => r.transpose().matmul(&m)?,
            None => m.clone(),
        };
        let (uq, wq) = match spec {
            Some(spec) => (quantize_activation(&u, spec)?, quantize_weight(&wt, spec)?),
            None => (u.clone(), wt.clone()),
        };
        let o = uq.matmul(&wq)?.scale_cols(&l2)?;
        h = activate(&o, layer.activation);
        caches.push(LayerCache { l1, l2, r, s, u, uq, m, wt, wq, o });
    }
    Ok((caches, h))
}

fn backward(
    net: &ToyNetwork,
    params: &[LayerParams],
    caches: &[LayerCache],
    grad_out: Matrix,
    spec: Option<&QuantSpec>,
) -> Result<Vec<Grads>> {
    let mut grads = Vec::with_capacity(caches.len());
    let mut g_h = grad_out;
    for ((layer, p), c) in net.layers.iter().zip(params).zip(caches).rev() {
        let g_o = match layer.activation {
            Activation::None => g_h,
            Activation::Relu => g_h.hadamard_product(&c.o.map(|v| if v > 0.0 { 1.0 } else { 0.0 }))?,
        };
        let g_z = g_o.scale_cols(&c.l2)?;
        let g_uq = g_z.matmul(&c.wq.transpose())?;
        let g_wq = c.uq.transpose().matmul(&g_z)?;
        let (g_u, g_wt) = match spec {
            Some(spec) => (
                fake_quantize_backward(&c.u, spec, &g_uq)?,
                quantize_weight_backward(&c.wt, spec, &g_wq)?,
            ),
            None => (g_uq, g_wq),
        };
        let (g_s, g_m) = match &c.r {
            Some(r) => (g_u.matmul(&r.transpose())?, r.matmul(&g_wt)?),
            None => (g_u.clone(), g_wt.clone()),
        };
        let n = c.l1.len();
        let m = c.l2.len();
        let mut log_l2 = vec![0.0; m];
        for b in 0..g_o.rows() {
            for j in 0..m {
                log_l2[j] += g_o[(b, j)] * c.o[(b, j)];
            }
        }
        for k in 0..n {
            for j in 0..m {
                log_l2[j] -= g_wt[(k, j)] * c.wt[(k, j)];
            }
        }
        let mut log_l1 = vec![0.0; n];
        for b in 0..g_s.rows() {
            for i in 0..n {
                log_l1[i] += g_s[(b, i)] * c.s[(b, i)];
            }
        }
        for i in 0..n {
            for j in 0..m {
                log_l1[i] -= g_m[(i, j)] * c.m[(i, j)];
            }
        }
        let skew = match &p.skew {
            Some(s) => {
                let g_r = c.s.transpose().matmul(&g_u)?.add(&c.m.matmul(&g_wt.transpose())?)?;
                let g_c = match &p.base {
                    Some(b) => b.transpose().matmul(&g_r)?,
                    None => g_r,
                };
                // C = 2 (I + S)^-1 - I, so dC = -2 B dS B with B = (I + S)^-1.
                let b = (Matrix::identity(n).add(s)?)
                    .to_nalgebra()
                    .try_inverse()
                    .map(|m| Matrix::from_nalgebra(&m))
                    .ok_or_else(|| BdqError::Degenerate("I + S is singular".into()))?;
                let bt = b.transpose();
                let g_full = bt.matmul(&g_c)?.matmul(&bt)?.scale(-2.0);
                Some(g_full.sub(&g_full.transpose())?)
            }
            None => None,
        };
        grads.push(Grads { log_l1, log_l2, skew });
        g_h = g_s.scale_cols(&c.l1)?;
    }
    grads.reverse();
    Ok(grads)
}

/// Mean loss over rows and its gradient with respect to the student logits.
fn batch_loss(
    teacher: &Matrix,
    student: &Matrix,
    loss: LossKind,
    delta: f64,
    reference: Option<&[Vec<f64>]>,
) -> Result<(f64, Matrix)> {
    let rows = teacher.rows();
    let mut total = 0.0;
    let mut grad = Vec::with_capacity(student.len());
    for b in 0..rows {
        let q = softmax(teacher.row(b));
        let p = softmax(student.row(b));
        let (l, g) = match loss {
            LossKind::Ce => rce_eval(&q, &p, None, 1.0).and_then(|_| {
                let l = cross_entropy(&q, &p)?;
                let g: Vec<f64> = q.iter().zip(&p).map(|(qi, pi)| if *qi > 0.0 { -qi / pi } else { 0.0 }).collect();
                Ok((l, g))
            })?,
            LossKind::Rce => rce_eval(&q, &p, reference.map(|r| r[b].as_slice()), delta)?,
        };
        total += l;
        grad.extend(softmax_backward(&p, &g).into_iter().map(|v| v / rows as f64));
    }
    Ok((total / rows as f64, Matrix::from_vec(rows, student.cols(), grad)))
}

fn select_rows(x: &Matrix, idx: &[usize]) -> Matrix {
    let mut data = Vec::with_capacity(idx.len() * x.cols());
    for &i in idx {
        data.extend_from_slice(x.row(i));
    }
    Matrix::from_vec(idx.len(), x.cols(), data)
}

/// Loss of the current transform pairs, and the gradient with respect to
/// all log-diagonal entries (layer by layer, `lambda1` then `lambda2`).
pub fn loss_and_gradient(
    net: &ToyNetwork,
    x: &Matrix,
    spec: Option<&QuantSpec>,
    loss: LossKind,
    delta: f64,
) -> Result<(f64, Vec<f64>)> {
    net.validate()?;
    let params: Vec<LayerParams> = net.pairs.iter().map(|p| LayerParams::from_pair(p, false)).collect();
    let teacher = net.teacher_forward(x)?;
    let (caches, out) = forward_cached(net, &params, x, spec)?;
    let (l, g) = batch_loss(&teacher, &out, loss, delta, None)?;
    let grads = backward(net, &params, &caches, g, spec)?;
    Ok((l, grads.into_iter().flat_map(|g| g.log_l1.into_iter().chain(g.log_l2)).collect()))
}

/// Calibration inputs plus an optional held-out batch.
#[derive(Debug, Clone)]
pub struct CalibrationData {
    pub train: Matrix,
    pub heldout: Option<Matrix>,
}

/// Learns the transform pairs of `net` by plain gradient descent with cosine
/// learning-rate decay. The teacher is the untransformed full-precision
/// network; the student runs through the pairs and, when `spec` is given,
/// fake quantization with straight-through gradients.
pub fn calibrate(
    net: &ToyNetwork,
    data: &CalibrationData,
    spec: Option<&QuantSpec>,
    cfg: &CalibrationConfig,
) -> Result<CalibrationOutcome> {
    cfg.validate()?;
    net.validate()?;
    if let Some(s) = spec {
        s.validate()?;
    }
    if data.train.rows() == 0 {
        return Err(BdqError::Parameter("calibration set is empty".into()));
    }
    if data.train.cols() != net.in_dim() {
        return Err(shape_err(format!("{} input features", net.in_dim()), format!("{}", data.train.cols())));
    }
    let size = cfg.calib_set_size.min(data.train.rows());
    let train = select_rows(&data.train, &(0..size).collect::<Vec<_>>());
    let teacher = net.teacher_forward(&train)?;
    let held = match &data.heldout {
        Some(h) => Some((h.clone(), net.teacher_forward(h)?)),
        None => None,
    };

    let mut params: Vec<LayerParams> = net.pairs.iter().map(|p| LayerParams::from_pair(p, cfg.learn_rotation)).collect();
    let mut rng = rng_from_seed(cfg.seed);
    let batch = cfg.batch_size.min(size);
    let steps_per_epoch = size.div_ceil(batch);
    let total_steps = (cfg.epochs * steps_per_epoch).max(1);
    let mut ema: Option<Vec<Vec<f64>>> = cfg
        .ema_decay
        .map(|_| (0..size).map(|b| softmax(teacher.row(b))).collect());

    let snapshot = |params: &[LayerParams], epoch: usize| -> Result<TraceRow> {
        let (_, out) = forward_cached(net, params, &train, spec)?;
        let (train_loss, _) = batch_loss(&teacher, &out, cfg.loss, cfg.delta, None)?;
        let heldout_loss = match &held {
            Some((hx, hy)) => {
                let (_, ho) = forward_cached(net, params, hx, spec)?;
                Some(batch_loss(hy, &ho, cfg.loss, cfg.delta, None)?.0)
            }
            None => None,
        };
        let mut flat = 0.0;
        let mut max_abs: f64 = 0.0;
        let (caches, exact) = forward_cached(net, params, &train, None)?;
        for c in &caches {
            flat += raw_flatness(&c.wt)?;
            max_abs = max_abs.max(c.wt.max_abs());
        }
        Ok(TraceRow {
            epoch,
            train_loss,
            heldout_loss,
            mean_flatness: flat / caches.len() as f64,
            max_abs_weight: max_abs,
            output_deviation: exact.max_abs_diff(&teacher)?,
        })
    };

    let mut trace = vec![snapshot(&params, 0)?];
    let mut last_good = params.clone();
    let mut diverged_at = None;
    let mut order: Vec<usize> = (0..size).collect();
    let mut step = 0usize;
    'epochs: for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(batch) {
            let xb = select_rows(&train, chunk);
            let yb = select_rows(&teacher, chunk);
            let (caches, out) = match forward_cached(net, &params, &xb, spec) {
                Ok(v) => v,
                Err(BdqError::Domain(_)) => {
                    diverged_at = Some(epoch);
                    break 'epochs;
                }
                Err(e) => return Err(e),
            };
            let refs: Option<Vec<Vec<f64>>> = ema.as_ref().map(|e| chunk.iter().map(|&i| e[i].clone()).collect());
            let (l, g) = match batch_loss(&yb, &out, cfg.loss, cfg.delta, refs.as_deref()) {
                Ok(v) => v,
                Err(BdqError::Domain(_)) => (f64::NAN, Matrix::zeros(out.rows(), out.cols())),
                Err(e) => return Err(e),
            };
            if !l.is_finite() {
                diverged_at = Some(epoch);
                break 'epochs;
            }
            if let (Some(e), Some(decay)) = (ema.as_mut(), cfg.ema_decay) {
                for (row, &i) in chunk.iter().enumerate() {
                    let p = softmax(out.row(row));
                    for (a, b) in e[i].iter_mut().zip(p) {
                        *a = decay * *a + (1.0 - decay) * b;
                    }
                }
            }
            let grads = backward(net, &params, &caches, g, spec)?;
            let lr = cfg.learning_rate * 0.5 * (1.0 + (std::f64::consts::PI * step as f64 / total_steps as f64).cos());
            for (p, g) in params.iter_mut().zip(&grads) {
                p.log_l1.iter_mut().zip(&g.log_l1).for_each(|(v, d)| *v -= lr * d);
                p.log_l2.iter_mut().zip(&g.log_l2).for_each(|(v, d)| *v -= lr * d);
                if let (Some(s), Some(gs)) = (p.skew.as_mut(), g.skew.as_ref()) {
                    *s = s.sub(&gs.scale(lr))?;
                }
            }
            step += 1;
        }
        let row = match snapshot(&params, epoch) {
            Ok(r) => r,
            Err(BdqError::Domain(_)) => {
                diverged_at = Some(epoch);
                break;
            }
            Err(e) => return Err(e),
        };
        if !row.train_loss.is_finite() || params.iter().any(|p| p.log_l1.iter().chain(&p.log_l2).any(|v| !v.is_finite())) {
            diverged_at = Some(epoch);
            break;
        }
        trace.push(row);
        last_good = params.clone();
    }
    let pairs = last_good.iter().map(LayerParams::to_pair).collect::<Result<Vec<_>>>()?;
    Ok(CalibrationOutcome {
        pairs,
        trace,
        diverged_at,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::oracle::central_difference;
    use crate::quantizer::{Granularity, QuantMode};
    use proptest::prelude::*;
    use rand::Rng;

    fn random_distribution(rng: &mut impl Rng, n: usize) -> Vec<f64> {
        let z: Vec<f64> = (0..n).map(|_| rng.random_range(-2.0..2.0)).collect();
        softmax(&z)
    }

    fn spec4() -> QuantSpec {
        QuantSpec::new(4, QuantMode::SymmetricSigned, Granularity::PerTensor).unwrap()
    }

    #[test]
    fn cross_entropy_examples() {
        let u = [0.25; 4];
        assert!((cross_entropy(&u, &u).unwrap() - 4f64.ln()).abs() < 1e-15);
        let p = [0.1, 0.6, 0.3];
        assert!((cross_entropy(&[0.0, 1.0, 0.0], &p).unwrap() + 0.6f64.ln()).abs() < 1e-15);
        assert!(cross_entropy(&[0.5, 0.5], &[1.0, 0.0]).is_err());
        assert!(cross_entropy(&[0.5, 0.6], &[0.5, 0.5]).is_err());
    }

    #[test]
    fn rce_examples() {
        let p = [0.2, 0.3, 0.5];
        assert!(rce_loss(&p, &p, 1.0).unwrap().abs() < 1e-15);
        // -ln 0.5 + 0.5 ln 0.75 + 0.5 ln 0.25
        let v = rce_loss(&[1.0, 0.0], &[0.5, 0.5], 0.5).unwrap();
        let direct = -(0.5f64).ln() + 0.5 * 0.75f64.ln() + 0.5 * 0.25f64.ln();
        assert!((v - direct).abs() < 1e-15);
        assert!((v + 0.1438).abs() < 1e-4);
        assert!(rce_loss(&[1.0, 0.0], &[0.5, 0.5], 0.0).is_err());
        assert!(rce_loss(&p, &p, 1.5).is_err());
    }

    #[test]
    fn rce_gradient_at_fixed_point() {
        let p = [0.2, 0.3, 0.5];
        let g = rce_gradient(&p, &p, 1.0).unwrap();
        let fd = central_difference(|x| rce_loss_unchecked(&p, x, 1.0), &p, 1e-6);
        for (a, b) in g.iter().zip(&fd) {
            assert!(a.is_finite());
            assert!((a - b).abs() <= 1e-6 * a.abs().max(1.0));
        }
    }

    /// Eq.-level evaluation without the simplex check, for perturbed inputs.
    fn rce_loss_unchecked(q: &[f64], p: &[f64], delta: f64) -> f64 {
        q.iter()
            .zip(p)
            .map(|(&qi, &pi)| {
                let a = if qi > 0.0 { qi * pi.ln() } else { 0.0 };
                a - pi * (delta * pi + (1.0 - delta) * qi).ln()
            })
            .map(|t| -t)
            .sum()
    }

    #[test]
    fn rce_gradient_matches_differences() {
        let mut rng = rng_from_seed(5);
        for _ in 0..100 {
            let n = rng.random_range(2..8);
            let q = random_distribution(&mut rng, n);
            let p = random_distribution(&mut rng, n);
            let delta = rng.random_range(0.0..=1.0);
            let g = rce_gradient(&q, &p, delta).unwrap();
            let fd = central_difference(|x| rce_loss_unchecked(&q, x, delta), &p, 1e-6);
            for (a, b) in g.iter().zip(&fd) {
                assert!((a - b).abs() <= 1e-5 * a.abs().max(1.0), "{a} vs {b}");
            }
        }
    }

    #[test]
    fn logit_gradient_matches_differences() {
        let mut rng = rng_from_seed(6);
        for _ in 0..50 {
            let q = random_distribution(&mut rng, 5);
            let z: Vec<f64> = (0..5).map(|_| rng.random_range(-3.0..3.0)).collect();
            let delta = rng.random_range(0.0..=1.0);
            let g = rce_logit_gradient(&q, &z, delta).unwrap();
            let fd = central_difference(|x| rce_loss(&q, &softmax(x), delta).unwrap(), &z, 1e-6);
            for (a, b) in g.iter().zip(&fd) {
                assert!((a - b).abs() <= 1e-6 * a.abs().max(1.0));
            }
        }
    }

    #[test]
    fn delta_one_gradient_is_ce_minus_entropy() {
        let mut rng = rng_from_seed(7);
        for _ in 0..20 {
            let q = random_distribution(&mut rng, 4);
            let p = random_distribution(&mut rng, 4);
            let g = rce_gradient(&q, &p, 1.0).unwrap();
            // d/dp (CE - H) = -q/p + ln p + 1
            for i in 0..4 {
                assert!((g[i] - (-q[i] / p[i] + p[i].ln() + 1.0)).abs() < 1e-12);
            }
        }
    }

    fn toy(seed: u64) -> (ToyNetwork, Matrix) {
        let net = ToyNetwork::planted(seed, &[8, 8, 4], 10.0, 2).unwrap();
        let x = gaussian_matrix(&mut rng_from_seed(seed + 100), 16, 8, 1.0);
        (net, x)
    }

    fn perturbed(net: &ToyNetwork, seed: u64, rotate: bool) -> ToyNetwork {
        let mut rng = rng_from_seed(seed);
        let base = if rotate { net.with_rotations(seed).unwrap() } else { net.clone() };
        let pairs = base
            .pairs
            .iter()
            .map(|p| TransformPair {
                lambda1: p.lambda1.iter().map(|_| rng.random_range(-0.5f64..0.5).exp()).collect(),
                lambda2: p.lambda2.iter().map(|_| rng.random_range(-0.5f64..0.5).exp()).collect(),
                ..p.clone()
            })
            .collect();
        base.with_pairs(pairs).unwrap()
    }

    fn log_params(net: &ToyNetwork) -> Vec<f64> {
        net.pairs
            .iter()
            .flat_map(|p| p.lambda1.iter().chain(&p.lambda2).map(|v| v.ln()).collect::<Vec<_>>())
            .collect()
    }

    fn with_log_params(net: &ToyNetwork, v: &[f64]) -> ToyNetwork {
        let mut it = v.iter();
        let pairs = net
            .pairs
            .iter()
            .map(|p| TransformPair {
                lambda1: (0..p.in_dim()).map(|_| it.next().unwrap().exp()).collect(),
                lambda2: (0..p.out_dim()).map(|_| it.next().unwrap().exp()).collect(),
                ..p.clone()
            })
            .collect();
        net.with_pairs(pairs).unwrap()
    }

    #[test]
    fn network_gradient_matches_differences() {
        let (net, x) = toy(1);
        for rotate in [false, true] {
            let net = perturbed(&net, 2, rotate);
            let x = x.scale(1.0);
            for loss in [LossKind::Ce, LossKind::Rce] {
                let (_, g) = loss_and_gradient(&net, &x, None, loss, 0.5).unwrap();
                assert!(g.iter().all(|v| v.abs() < 1e-10), "exact pairs have zero gradient");
                // shift the teacher away by changing the student's weights
                let mut shifted = net.clone();
                shifted.layers[0].weight = shifted.layers[0].weight.map(|v| v * 1.1);
                let (_, g) = analytic_vs_teacher(&net, &shifted, &x, loss);
                let theta = log_params(&net);
                let fd = central_difference(
                    |v| analytic_vs_teacher(&with_log_params(&net, v), &shifted, &x, loss).0,
                    &theta,
                    1e-6,
                );
                for (a, b) in g.iter().zip(&fd) {
                    assert!((a - b).abs() <= 1e-6 * a.abs().max(1e-3), "{a} vs {b}");
                }
            }
        }
    }

    /// Loss and gradient of `student` against the teacher of `teacher_net`.
    fn analytic_vs_teacher(student: &ToyNetwork, teacher_net: &ToyNetwork, x: &Matrix, loss: LossKind) -> (f64, Vec<f64>) {
        let params: Vec<LayerParams> = student.pairs.iter().map(|p| LayerParams::from_pair(p, false)).collect();
        let teacher = teacher_net.teacher_forward(x).unwrap();
        let (caches, out) = forward_cached(student, &params, x, None).unwrap();
        let (l, g) = batch_loss(&teacher, &out, loss, 0.5, None).unwrap();
        let grads = backward(student, &params, &caches, g, None).unwrap();
        (l, grads.into_iter().flat_map(|g| g.log_l1.into_iter().chain(g.log_l2)).collect())
    }

    #[test]
    fn rotation_gradient_matches_differences() {
        let (net, x) = toy(3);
        let net = perturbed(&net, 4, true);
        let mut shifted = net.clone();
        shifted.layers[1].weight = shifted.layers[1].weight.map(|v| v * 0.9);
        let teacher = shifted.teacher_forward(&x).unwrap();
        let mut params: Vec<LayerParams> = net.pairs.iter().map(|p| LayerParams::from_pair(p, true)).collect();
        let mut rng = rng_from_seed(9);
        for p in params.iter_mut() {
            let n = p.log_l1.len();
            let g = gaussian_matrix(&mut rng, n, n, 0.1);
            p.skew = Some(g.sub(&g.transpose()).unwrap());
        }
        let eval = |params: &[LayerParams]| {
            let (_, out) = forward_cached(&net, params, &x, None).unwrap();
            batch_loss(&teacher, &out, LossKind::Rce, 0.5, None).unwrap().0
        };
        let (caches, out) = forward_cached(&net, &params, &x, None).unwrap();
        let (_, g) = batch_loss(&teacher, &out, LossKind::Rce, 0.5, None).unwrap();
        let grads = backward(&net, &params, &caches, g, None).unwrap();
        let h = 1e-6;
        for layer in 0..params.len() {
            let analytic = grads[layer].skew.as_ref().unwrap();
            for (k, l) in [(0, 1), (2, 5), (3, 7)] {
                let orig = params[layer].skew.clone().unwrap();
                let bump = |d: f64| {
                    let mut s = orig.clone();
                    s[(k, l)] += d;
                    s[(l, k)] -= d;
                    s
                };
                let mut probe = params.clone();
                probe[layer].skew = Some(bump(h));
                let up = eval(&probe);
                probe[layer].skew = Some(bump(-h));
                let down = eval(&probe);
                let fd = (up - down) / (2.0 * h);
                let a = analytic[(k, l)];
                assert!((a - fd).abs() <= 1e-6 * a.abs().max(1e-3), "layer {layer} ({k},{l}): {a} vs {fd}");
            }
        }
    }

    #[test]
    fn quantization_off_stays_at_teacher() {
        let (net, x) = toy(4);
        let net = net.with_rotations(1).unwrap();
        let cfg = CalibrationConfig {
            epochs: 20,
            learning_rate: 0.5,
            batch_size: 4,
            ..CalibrationConfig::default()
        };
        let out = calibrate(&net, &CalibrationData { train: x.clone(), heldout: None }, None, &cfg).unwrap();
        assert!(out.trace.iter().all(|r| r.output_deviation <= 1e-9));
        let learned = net.with_pairs(out.pairs).unwrap();
        let y = learned.forward(&x, None).unwrap();
        assert!(y.max_abs_diff(&net.teacher_forward(&x).unwrap()).unwrap() <= 1e-9);
    }

    #[test]
    fn calibration_reduces_quantized_loss() {
        let (net, x) = toy(5);
        let net = net.with_rotations(2).unwrap();
        let cfg = CalibrationConfig {
            epochs: 100,
            learning_rate: 0.05,
            ..CalibrationConfig::default()
        };
        let out = calibrate(&net, &CalibrationData { train: x, heldout: None }, Some(&spec4()), &cfg).unwrap();
        assert!(out.diverged_at.is_none());
        assert_eq!(out.trace.len(), 101);
        assert!(out.trace.last().unwrap().train_loss < out.trace[0].train_loss);
    }

    #[test]
    fn ema_and_rotation_flags_run() {
        let (net, x) = toy(6);
        let cfg = CalibrationConfig {
            epochs: 5,
            learning_rate: 0.05,
            ema_decay: Some(0.9),
            learn_rotation: true,
            ..CalibrationConfig::default()
        };
        let out = calibrate(&net.with_rotations(0).unwrap(), &CalibrationData { train: x, heldout: None }, Some(&spec4()), &cfg)
            .unwrap();
        assert_eq!(out.trace.len(), 6);
        for p in &out.pairs {
            assert!(p.rotation.as_ref().unwrap().orthogonality_defect() < 1e-10);
        }
    }

    #[test]
    fn calibration_rejects_bad_inputs() {
        let (net, x) = toy(7);
        let empty = CalibrationData { train: Matrix::zeros(0, 8), heldout: None };
        assert!(calibrate(&net, &empty, None, &CalibrationConfig::default()).is_err());
        let bad = CalibrationConfig { delta: 1.5, ..CalibrationConfig::default() };
        assert!(calibrate(&net, &CalibrationData { train: x.clone(), heldout: None }, None, &bad).is_err());
        let bad = CalibrationConfig { learning_rate: 0.0, ..CalibrationConfig::default() };
        assert!(calibrate(&net, &CalibrationData { train: x, heldout: None }, None, &bad).is_err());
    }

    #[test]
    fn divergence_is_reported() {
        let (net, x) = toy(8);
        let cfg = CalibrationConfig {
            epochs: 50,
            learning_rate: 1e6,
            ..CalibrationConfig::default()
        };
        let out = calibrate(&net, &CalibrationData { train: x, heldout: None }, Some(&spec4()), &cfg).unwrap();
        assert!(out.diverged_at.is_some());
        assert!(!out.trace.is_empty());
        assert!(out.pairs.iter().all(|p| p.validate().is_ok()));
    }

    #[test]
    fn trace_csv_schema() {
        let rows = [TraceRow {
            epoch: 0,
            train_loss: 1.0,
            heldout_loss: None,
            mean_flatness: -2.0,
            max_abs_weight: 3.0,
            output_deviation: 0.0,
        }];
        let mut buf = Vec::new();
        write_trace_csv(&rows, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().next().unwrap(), TRACE_COLUMNS);
        assert_eq!(text.lines().nth(1).unwrap(), "0,1.0,,-2.0,3.0,0.0");
    }

    proptest! {
        #[test]
        fn delta_one_identity(seed in any::<u64>(), n in 2usize..10) {
            let mut rng = rng_from_seed(seed);
            let q = random_distribution(&mut rng, n);
            let p = random_distribution(&mut rng, n);
            let lhs = rce_loss(&q, &p, 1.0).unwrap();
            let rhs = cross_entropy(&q, &p).unwrap() - entropy(&p).unwrap();
            prop_assert!((lhs - rhs).abs() < 1e-12);
        }

        #[test]
        fn rce_continuous_in_delta(seed in any::<u64>(), delta in 0.0f64..1.0) {
            let mut rng = rng_from_seed(seed);
            let q = random_distribution(&mut rng, 5);
            let p = random_distribution(&mut rng, 5);
            let a = rce_loss(&q, &p, delta).unwrap();
            let b = rce_loss(&q, &p, (delta + 1e-9).min(1.0)).unwrap();
            prop_assert!((a - b).abs() < 1e-6);
        }
    }
}
