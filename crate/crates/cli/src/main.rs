use std::fs;
use std::io::{self, BufReader, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use bdq_core::calibration::{
    calibrate, write_trace_csv, CalibrationConfig, CalibrationData, LossKind, ToyNetwork, TRACE_COLUMNS,
};
use bdq_core::flatness::{optimize_flatness_with, raw_flatness, FlatnessOptions, DEFAULT_MAX_ITERS, DEFAULT_TOL};
use bdq_core::harness::{
    build_pair, compare, compare_sweep, end_to_end_sweep, median, overfit_sweep, parse_pipelines, summarize_end_to_end,
    validate, CompareConfig, ComparisonReport, EndToEndConfig, PipelineId, Suite, ValidationReport,
};
use bdq_core::numerics::{gaussian_matrix, rng_from_seed, sample_matrix};
use bdq_core::quantizer::{bin_occupancy, dequantize, quantize, Granularity, QuantMode, QuantSpec};
use bdq_core::{Matrix, OutlierProfile};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::{json, Value};

const EXIT_USAGE: u8 = 1;
const EXIT_VALIDATION: u8 = 2;

#[derive(Parser)]
#[command(name = "bdq", version, about = "Outlier-aware post-training quantization experiments")]
struct Cli {
    /// Seed for every random draw of the command.
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    /// Output path; stdout when omitted.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[arg(long, global = true, value_enum, default_value_t = Format::Json)]
    format: Format,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum Format {
    Json,
    Csv,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum ModeArg {
    #[value(name = "paper_max_abs")]
    PaperMaxAbs,
    #[value(name = "min_max_affine")]
    MinMaxAffine,
    #[value(name = "symmetric_signed")]
    SymmetricSigned,
}

impl From<ModeArg> for QuantMode {
    fn from(value: ModeArg) -> Self {
        match value {
            ModeArg::PaperMaxAbs => QuantMode::PaperMaxAbs,
            ModeArg::MinMaxAffine => QuantMode::MinMaxAffine,
            ModeArg::SymmetricSigned => QuantMode::SymmetricSigned,
        }
    }
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum GranularityArg {
    #[value(name = "per_tensor")]
    PerTensor,
    #[value(name = "per_row")]
    PerRow,
}

impl From<GranularityArg> for Granularity {
    fn from(value: GranularityArg) -> Self {
        match value {
            GranularityArg::PerTensor => Granularity::PerTensor,
            GranularityArg::PerRow => Granularity::PerRow,
        }
    }
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum LossArg {
    Ce,
    Rce,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum SuiteArg {
    #[value(name = "error_model")]
    ErrorModel,
    Flatness,
    Transforms,
    Losses,
    All,
}

impl From<SuiteArg> for Suite {
    fn from(value: SuiteArg) -> Self {
        match value {
            SuiteArg::ErrorModel => Suite::ErrorModel,
            SuiteArg::Flatness => Suite::Flatness,
            SuiteArg::Transforms => Suite::Transforms,
            SuiteArg::Losses => Suite::Losses,
            SuiteArg::All => Suite::All,
        }
    }
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum ReportKind {
    /// Pipeline comparison over a range of seeds.
    #[value(name = "compare_sweep")]
    CompareSweep,
    /// Calibrated toy-network ordering over a range of seeds.
    #[value(name = "end_to_end")]
    EndToEnd,
    /// Held-out behaviour of long training on a tiny calibration set.
    Overfit,
}

#[derive(Args, Clone, Copy)]
struct ProfileArgs {
    #[arg(long, default_value_t = 1.0)]
    sigma: f64,
    #[arg(long, default_value_t = 1.0)]
    k: f64,
    #[arg(long, default_value_t = 0.0)]
    outlier_frac: f64,
}

#[derive(Args, Clone, Copy)]
struct SpecArgs {
    #[arg(long, default_value_t = 4)]
    bits: u32,
    #[arg(long, value_enum, default_value_t = ModeArg::SymmetricSigned)]
    mode: ModeArg,
    #[arg(long, value_enum, default_value_t = GranularityArg::PerTensor)]
    granularity: GranularityArg,
    /// Clamp values to [-clip, clip] before computing the scale.
    #[arg(long)]
    clip: Option<f64>,
}

impl SpecArgs {
    fn spec(&self) -> Result<QuantSpec> {
        let spec = QuantSpec::new(self.bits, self.mode.into(), self.granularity.into())?;
        Ok(match self.clip {
            Some(c) => spec.with_clip(c)?,
            None => spec,
        })
    }
}

#[derive(Subcommand)]
enum Command {
    /// Sample an outlier-contaminated Gaussian matrix (BDQ1, or CSV with --format csv).
    Gen {
        rows: usize,
        cols: usize,
        #[command(flatten)]
        profile: ProfileArgs,
    },
    /// Quantize a matrix and report scales, error and bin occupancy.
    Quantize {
        matrix: PathBuf,
        #[command(flatten)]
        spec: SpecArgs,
        /// Write the integer codes (BDQI) here and the JSON header beside them.
        #[arg(long)]
        codes: Option<PathBuf>,
    },
    /// Optimize the bidirectional diagonal scaling of a matrix.
    Flatness {
        matrix: PathBuf,
        #[arg(long, default_value_t = DEFAULT_TOL)]
        tol: f64,
        #[arg(long, default_value_t = DEFAULT_MAX_ITERS)]
        max_iters: usize,
        #[arg(long, default_value_t = bdq_core::flatness::DEFAULT_RESTARTS)]
        restarts: usize,
    },
    /// Build one pipeline's transform pair and apply it to a matrix.
    Transform {
        matrix: PathBuf,
        #[arg(long, default_value = "bdq")]
        pipeline: PipelineId,
        /// Save the pair as JSON (rotation payload beside it as BDQ1).
        #[arg(long)]
        pair_out: Option<PathBuf>,
        /// Save the transformed weight as BDQ1.
        #[arg(long)]
        weight_out: Option<PathBuf>,
    },
    /// Compare quantization pipelines on one matrix. With --out, writes the
    /// report in both formats (the second beside the first).
    Compare {
        /// BDQ1 or CSV matrix; sampled from the profile flags when omitted.
        matrix: Option<PathBuf>,
        #[arg(long, default_value = "none,rot,diag,bdq,kron")]
        pipelines: String,
        #[arg(long, default_value_t = 4)]
        bits: u32,
        #[arg(long, value_enum, default_value_t = GranularityArg::PerTensor)]
        granularity: GranularityArg,
        #[arg(long, default_value_t = 64)]
        rows: usize,
        #[arg(long, default_value_t = 64)]
        cols: usize,
        #[command(flatten)]
        profile: ProfileArgs,
        /// Activation batch size.
        #[arg(long, default_value_t = 128)]
        batch: usize,
        /// Record wall time per pipeline (makes reports non-reproducible).
        #[arg(long)]
        timing: bool,
    },
    /// Calibrate the diagonal scales of a planted-outlier toy network.
    Calibrate {
        #[command(flatten)]
        opts: CalibrateArgs,
        /// Learned pairs as a JSON array; defaults to <out>.pairs.json.
        #[arg(long)]
        pairs_out: Option<PathBuf>,
    },
    /// Run oracle and invariant suites. Exits with 2 on any failed check.
    Validate {
        #[arg(value_enum, default_value_t = SuiteArg::All)]
        suite: SuiteArg,
    },
    /// Seed-sweep experiments with per-seed rows and medians.
    Report {
        #[arg(value_enum)]
        kind: ReportKind,
        #[arg(long, default_value_t = 20)]
        seeds: u64,
        #[arg(long, default_value = "none,rot,diag,bdq,kron")]
        pipelines: String,
        #[arg(long, default_value_t = 4)]
        bits: u32,
        #[arg(long, default_value_t = 64)]
        rows: usize,
        #[arg(long, default_value_t = 64)]
        cols: usize,
        #[arg(long, default_value_t = 1.0)]
        sigma: f64,
        #[arg(long, default_value_t = 100.0)]
        k: f64,
        #[arg(long, default_value_t = 0.001)]
        outlier_frac: f64,
        /// Calibration set size of the overfitting probe.
        #[arg(long, default_value_t = 8)]
        probe_size: usize,
        /// Epochs of the overfitting probe.
        #[arg(long, default_value_t = 2000)]
        probe_epochs: usize,
    },
}

#[derive(Args, Clone)]
struct CalibrateArgs {
    /// Layer widths, input first.
    #[arg(long, default_value = "16,16,8", value_delimiter = ',')]
    dims: Vec<usize>,
    /// Planted outlier magnitude in units of the weight scale.
    #[arg(long, default_value_t = 20.0)]
    k: f64,
    #[arg(long, default_value_t = 3)]
    outliers_per_layer: usize,
    #[arg(long, value_enum, default_value_t = LossArg::Rce)]
    loss: LossArg,
    #[arg(long, default_value_t = 0.5)]
    delta: f64,
    #[arg(long, default_value_t = 5e-3)]
    lr: f64,
    #[arg(long, default_value_t = 200)]
    epochs: usize,
    #[arg(long, default_value_t = 128)]
    batch_size: usize,
    #[arg(long, default_value_t = 128)]
    calib_size: usize,
    #[arg(long, default_value_t = 512)]
    heldout_size: usize,
    #[arg(long, default_value_t = 4)]
    bits: u32,
    /// Use an exponential moving average of past predictions in the RCE mixture.
    #[arg(long)]
    ema_decay: Option<f64>,
    /// Also learn the rotations.
    #[arg(long)]
    learn_rotation: bool,
    /// Start from identity pairs instead of seeded rotations.
    #[arg(long)]
    no_rotation: bool,
    /// Calibrate without fake quantization.
    #[arg(long)]
    no_quant: bool,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(EXIT_USAGE)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    match run(&cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(EXIT_VALIDATION),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(EXIT_USAGE)
        }
    }
}

/// Returns `false` when a validation check failed.
fn run(cli: &Cli) -> Result<bool> {
    let out = cli.out.as_deref();
    match &cli.command {
        Command::Gen { rows, cols, profile } => {
            let p = OutlierProfile::new(profile.sigma, profile.k, profile.outlier_frac, cli.seed)?;
            let w = sample_matrix(&p, *rows, *cols)?;
            let bytes = match cli.format {
                Format::Csv => {
                    let mut buf = Vec::new();
                    w.write_csv(&mut buf)?;
                    buf
                }
                Format::Json => w.to_bdq1_bytes(),
            };
            emit(out, &bytes)?;
        }
        Command::Quantize { matrix, spec, codes } => {
            let w = load_matrix(matrix)?;
            let spec = spec.spec()?;
            let q = quantize(&w, &spec)?;
            if let Some(path) = codes {
                q.save(path).with_context(|| format!("writing {}", path.display()))?;
            }
            let residual = dequantize(&q).sub(&w)?;
            let occ = bin_occupancy(&q)?;
            let degenerate = q.degenerate.iter().filter(|&&d| d).count();
            let body = match cli.format {
                Format::Json => pretty(&json!({
                    "shape": [q.rows, q.cols],
                    "spec": spec,
                    "scales": q.scales,
                    "zero_points": q.zero_points,
                    "degenerate_groups": degenerate,
                    "weight_mse": residual.mean_square(),
                    "max_abs_error": residual.max_abs(),
                    "bin_occupancy": occ,
                }))?,
                Format::Csv => format!(
                    "rows,cols,bits,groups,degenerate_groups,weight_mse,max_abs_error,bin_occupancy_uniformity\n{},{},{},{},{},{:?},{:?},{:?}\n",
                    q.rows,
                    q.cols,
                    spec.bits,
                    q.scales.len(),
                    degenerate,
                    residual.mean_square(),
                    residual.max_abs(),
                    occ.uniformity
                ),
            };
            emit(out, body.as_bytes())?;
        }
        Command::Flatness {
            matrix,
            tol,
            max_iters,
            restarts,
        } => {
            let w = load_matrix(matrix)?;
            let opts = FlatnessOptions {
                tol: *tol,
                max_iters: *max_iters,
                restarts: *restarts,
                seed: cli.seed,
            };
            let before = raw_flatness(&w)?;
            let (state, transform) = optimize_flatness_with(&w, &opts)?;
            let body = match cli.format {
                Format::Json => pretty(&json!({
                    "shape": [w.rows(), w.cols()],
                    "flatness_before": before,
                    "state": state,
                    "transform": transform,
                }))?,
                Format::Csv => format!(
                    "rows,cols,flatness_before,F,C,stationarity,iterations,converged\n{},{},{:?},{:?},{:?},{:?},{},{}\n",
                    w.rows(),
                    w.cols(),
                    before,
                    state.f,
                    state.c,
                    state.stationarity,
                    state.iterations,
                    state.converged
                ),
            };
            emit(out, body.as_bytes())?;
        }
        Command::Transform {
            matrix,
            pipeline,
            pair_out,
            weight_out,
        } => {
            let w = load_matrix(matrix)?;
            let pair = build_pair(&w, *pipeline, cli.seed)?;
            let wt = pair.transform_weight(&w)?;
            if let Some(path) = pair_out {
                pair.save(path).with_context(|| format!("writing {}", path.display()))?;
            }
            if let Some(path) = weight_out {
                wt.save_bdq1(path).with_context(|| format!("writing {}", path.display()))?;
            }
            let (before, after) = (raw_flatness(&w)?, raw_flatness(&wt)?);
            let defect = pair.rotation.as_ref().map_or(0.0, |r| r.orthogonality_defect());
            let body = match cli.format {
                Format::Json => pretty(&json!({
                    "pipeline": pipeline,
                    "seed": cli.seed,
                    "flatness_before": before,
                    "flatness_after": after,
                    "max_abs_before": w.max_abs(),
                    "max_abs_after": wt.max_abs(),
                    "orthogonality_defect": defect,
                    "pair": pair,
                }))?,
                Format::Csv => format!(
                    "pipeline,seed,flatness_before,flatness_after,max_abs_before,max_abs_after,orthogonality_defect\n{},{},{:?},{:?},{:?},{:?},{:?}\n",
                    pipeline,
                    cli.seed,
                    before,
                    after,
                    w.max_abs(),
                    wt.max_abs(),
                    defect
                ),
            };
            emit(out, body.as_bytes())?;
        }
        Command::Compare {
            matrix,
            pipelines,
            bits,
            granularity,
            rows,
            cols,
            profile,
            batch,
            timing,
        } => {
            let (w, prof) = match matrix {
                Some(path) => (load_matrix(path)?, None),
                None => {
                    let p = OutlierProfile::new(profile.sigma, profile.k, profile.outlier_frac, cli.seed)?;
                    (sample_matrix(&p, *rows, *cols)?, Some(p))
                }
            };
            let mut cfg = CompareConfig::new(parse_pipelines(pipelines)?, *bits, cli.seed)?;
            cfg.spec.granularity = (*granularity).into();
            cfg.batch = *batch;
            cfg.timing = *timing;
            let report = compare(&w, &cfg, prof)?;
            emit_compare(&report, out, cli.format)?;
        }
        Command::Calibrate { opts, pairs_out } => {
            run_calibrate(cli, opts, pairs_out.as_deref())?;
        }
        Command::Validate { suite } => {
            let report = validate((*suite).into())?;
            let body = match cli.format {
                Format::Json => pretty(&report)?,
                Format::Csv => validation_csv(&report),
            };
            emit(out, body.as_bytes())?;
            for c in report.checks.iter().filter(|c| !c.passed) {
                eprintln!(
                    "FAIL {}: measured {:e}, required {:?} {:e}",
                    c.name, c.measured, c.comparison, c.tolerance
                );
            }
            return Ok(report.passed);
        }
        Command::Report {
            kind,
            seeds,
            pipelines,
            bits,
            rows,
            cols,
            sigma,
            k,
            outlier_frac,
            probe_size,
            probe_epochs,
        } => {
            let seeds: Vec<u64> = (cli.seed..cli.seed + seeds).collect();
            let body = match kind {
                ReportKind::CompareSweep => {
                    let profile = OutlierProfile::new(*sigma, *k, *outlier_frac, cli.seed)?;
                    let cfg = CompareConfig::new(parse_pipelines(pipelines)?, *bits, cli.seed)?;
                    let reports = compare_sweep(&profile, *rows, *cols, &seeds, &cfg)?;
                    sweep_body(&reports, &cfg.pipelines, cli.format)?
                }
                ReportKind::EndToEnd => {
                    let cfg = EndToEndConfig::default();
                    let results = end_to_end_sweep(&seeds, &cfg)?;
                    match cli.format {
                        Format::Json => pretty(&json!({
                            "config": cfg,
                            "summary": summarize_end_to_end(&results),
                            "seeds": results,
                        }))?,
                        Format::Csv => {
                            let mut s = String::from("seed,none,rot,bdq,diverged\n");
                            for r in &results {
                                s.push_str(&format!("{},{:?},{:?},{:?},{}\n", r.seed, r.none, r.rot, r.bdq, r.diverged));
                            }
                            s
                        }
                    }
                }
                ReportKind::Overfit => {
                    let cfg = EndToEndConfig::default();
                    let probes = overfit_sweep(&seeds, *probe_size, *probe_epochs, &cfg)?;
                    let majority = probes.iter().filter(|p| p.minimum_before_final).count();
                    match cli.format {
                        Format::Json => pretty(&json!({
                            "calib_size": probe_size,
                            "epochs": probe_epochs,
                            "minimum_before_final": majority,
                            "seeds": probes,
                        }))?,
                        Format::Csv => {
                            let mut s = String::from(
                                "seed,best_epoch,final_epoch,minimum_before_final,ce_trained_heldout_ce,rce_trained_heldout_ce\n",
                            );
                            for p in &probes {
                                s.push_str(&format!(
                                    "{},{},{},{},{:?},{:?}\n",
                                    p.seed,
                                    p.best_epoch,
                                    p.final_epoch,
                                    p.minimum_before_final,
                                    p.ce_trained_heldout_ce,
                                    p.rce_trained_heldout_ce
                                ));
                            }
                            s
                        }
                    }
                }
            };
            emit(out, body.as_bytes())?;
        }
    }
    Ok(true)
}

fn run_calibrate(cli: &Cli, opts: &CalibrateArgs, pairs_out: Option<&Path>) -> Result<()> {
    let mut net = ToyNetwork::planted(cli.seed, &opts.dims, opts.k, opts.outliers_per_layer)?;
    if !opts.no_rotation {
        net = net.with_rotations(cli.seed)?;
    }
    let mut rng = rng_from_seed(cli.seed.wrapping_add(0x00e2_e000));
    let n = net.in_dim();
    let data = CalibrationData {
        train: gaussian_matrix(&mut rng, opts.calib_size, n, 1.0),
        heldout: (opts.heldout_size > 0).then(|| gaussian_matrix(&mut rng, opts.heldout_size, n, 1.0)),
    };
    let cfg = CalibrationConfig {
        learning_rate: opts.lr,
        epochs: opts.epochs,
        delta: opts.delta,
        batch_size: opts.batch_size,
        seed: cli.seed,
        loss: match opts.loss {
            LossArg::Ce => LossKind::Ce,
            LossArg::Rce => LossKind::Rce,
        },
        calib_set_size: opts.calib_size,
        ema_decay: opts.ema_decay,
        learn_rotation: opts.learn_rotation,
    };
    let spec = QuantSpec::new(opts.bits, QuantMode::SymmetricSigned, Granularity::PerTensor)?;
    let outcome = calibrate(&net, &data, (!opts.no_quant).then_some(&spec), &cfg)?;
    if let Some(epoch) = outcome.diverged_at {
        eprintln!("warning: calibration diverged at epoch {epoch}");
    }

    let body = match cli.format {
        Format::Csv => {
            let mut buf = Vec::new();
            write_trace_csv(&outcome.trace, &mut buf)?;
            String::from_utf8(buf)?
        }
        Format::Json => pretty(&json!({
            "columns": TRACE_COLUMNS.split(',').collect::<Vec<_>>(),
            "config": cfg,
            "diverged_at": outcome.diverged_at,
            "trace": outcome.trace,
        }))?,
    };
    emit(cli.out.as_deref(), body.as_bytes())?;

    let pairs_path = match (pairs_out, cli.out.as_deref()) {
        (Some(p), _) => Some(p.to_path_buf()),
        (None, Some(o)) => Some(o.with_extension("pairs.json")),
        (None, None) => None,
    };
    if let Some(path) = pairs_path {
        let mut saved = Vec::with_capacity(outcome.pairs.len());
        for (i, pair) in outcome.pairs.iter().enumerate() {
            let mut p = pair.clone();
            if let Some(r) = &pair.rotation {
                let bin = path.with_extension(format!("layer{i}.rot.bdq1"));
                r.save_bdq1(&bin)?;
                p.rotation_path = bin.file_name().map(|s| s.to_string_lossy().into_owned());
            }
            saved.push(p);
        }
        fs::write(&path, pretty(&saved)?).with_context(|| format!("writing {}", path.display()))?;
    }
    Ok(())
}

fn emit_compare(report: &ComparisonReport, out: Option<&Path>, format: Format) -> Result<()> {
    let json = report.to_json()? + "\n";
    let mut csv = Vec::new();
    report.write_csv(&mut csv)?;
    let (primary, secondary, ext) = match format {
        Format::Json => (json.into_bytes(), csv, "csv"),
        Format::Csv => (csv, json.into_bytes(), "json"),
    };
    emit(out, &primary)?;
    if let Some(path) = out {
        let sibling = path.with_extension(ext);
        if sibling != path {
            fs::write(&sibling, secondary).with_context(|| format!("writing {}", sibling.display()))?;
        }
    }
    Ok(())
}

fn sweep_body(reports: &[ComparisonReport], pipelines: &[PipelineId], format: Format) -> Result<String> {
    match format {
        Format::Json => {
            let medians: serde_json::Map<String, Value> = pipelines
                .iter()
                .map(|&id| {
                    let col = |f: fn(&bdq_core::harness::PipelineResult) -> f64| {
                        median(&reports.iter().filter_map(|r| r.get(id)).map(f).collect::<Vec<_>>())
                    };
                    (
                        id.to_string(),
                        json!({
                            "output_mse": col(|p| p.output_mse),
                            "weight_mse": col(|p| p.weight_mse),
                            "flatness_after": col(|p| p.flatness_after),
                        }),
                    )
                })
                .collect();
            pretty(&json!({ "medians": medians, "reports": reports }))
        }
        Format::Csv => {
            let mut buf = Vec::new();
            for (i, r) in reports.iter().enumerate() {
                let mut one = Vec::new();
                r.write_csv(&mut one)?;
                let text = String::from_utf8(one)?;
                let skip = usize::from(i > 0);
                for line in text.lines().skip(skip) {
                    writeln!(buf, "{line}")?;
                }
            }
            Ok(String::from_utf8(buf)?)
        }
    }
}

fn validation_csv(report: &ValidationReport) -> String {
    let mut s = String::from("suite,name,measured,comparison,tolerance,passed\n");
    for c in &report.checks {
        let suite = serde_json::to_value(c.suite).ok().and_then(|v| v.as_str().map(String::from)).unwrap_or_default();
        let cmp = serde_json::to_value(c.comparison)
            .ok()
            .and_then(|v| v.as_str().map(String::from))
            .unwrap_or_default();
        s.push_str(&format!("{suite},{},{:?},{cmp},{:?},{}\n", c.name, c.measured, c.tolerance, c.passed));
    }
    s
}

fn load_matrix(path: &Path) -> Result<Matrix> {
    let m = if path.extension().is_some_and(|e| e.eq_ignore_ascii_case("csv")) {
        let f = fs::File::open(path).with_context(|| format!("opening {}", path.display()))?;
        Matrix::read_csv(BufReader::new(f))
    } else {
        Matrix::load_bdq1(path)
    };
    m.with_context(|| format!("reading {}", path.display()))
}

fn pretty<T: serde::Serialize + ?Sized>(value: &T) -> Result<String> {
    Ok(serde_json::to_string_pretty(value)? + "\n")
}

fn emit(out: Option<&Path>, bytes: &[u8]) -> Result<()> {
    match out {
        Some(path) => fs::write(path, bytes).with_context(|| format!("writing {}", path.display()))?,
        None => {
            let mut stdout = io::stdout().lock();
            stdout.write_all(bytes)?;
            stdout.flush()?;
        }
    }
    Ok(())
}
