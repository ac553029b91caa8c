//! Command-line interface: `generate`, `fit`, `eval`, `bench-ls`,
//! `bench-scale`.
//!
//! Exit codes for `fit`: 0 converged, 3 stopped at an iteration or time
//! cap, 1 I/O or usage problems, 2 numerical failure (the aborted sweep is
//! rolled back before exiting). Other subcommands use 0/1/2 with the same
//! error split.
//!
//! Relative output paths are joined onto `MEIBP_OUT_DIR` when that
//! variable is set; input paths are always taken as given.

pub mod bench;

use crate::engine::{
    ConvergenceConfig, EngineConfig, FitStatus, ModelState, RowOptimizer, SweepReport,
};
use crate::error::{Error, Result};
use crate::evaluate::predictive_log_likelihood;
use crate::model::{
    load_matrix_auto, save_matrix_bin, save_matrix_csv, Dataset, GammaPrior, GammaPriors,
    HoldoutMask, Hyperparams, PreprocessScheme,
};
use crate::rowopt::LsConfig;
use crate::synth::{
    gen_binary_images, gen_sparse_factor_data, make_holdout_mask, BinaryImagesSpec,
    SparseFactorSpec,
};
use clap::{Args, Parser, Subcommand, ValueEnum};
use ndarray::Array2;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

/// Environment variable naming the default directory for output files.
pub const OUT_DIR_ENV: &str = "MEIBP_OUT_DIR";

/// Normative header of the per-sweep metrics CSV.
pub const METRICS_HEADER: &str =
    "iter,seconds,elbo,train_ll_mean,test_ll_mean,k_plus,rows_changed,gain_evals";

#[derive(Parser)]
#[command(
    name = "meibp",
    version,
    about = "Nonnegative binary latent feature models fitted by submodular row maximization"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset (and optionally a holdout mask).
    Generate(GenerateArgs),
    /// Fit a model to a data file.
    Fit(FitArgs),
    /// Evaluate a checkpoint on held-out entries.
    Eval(EvalArgs),
    /// Compare the row optimizers against exact enumeration at small K.
    BenchLs(BenchLsArgs),
    /// Measure gain evaluations per optimizer call over a K grid.
    BenchScale(BenchScaleArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Protocol {
    /// Bernoulli assignments times random binary factors plus noise.
    Sparse,
    /// Superpositions of 3x3 corner blocks on 6x6 images.
    Images,
}

#[derive(Args)]
struct GenerateArgs {
    /// Generation protocol.
    #[arg(long, value_enum, default_value = "sparse")]
    protocol: Protocol,
    /// Rows (observations).
    #[arg(long, default_value_t = 500)]
    n: usize,
    /// Columns (dimensions); fixed at 36 for the images protocol.
    #[arg(long, default_value_t = 500)]
    d: usize,
    /// True latent features; fixed at 4 for the images protocol.
    #[arg(long, default_value_t = 20)]
    k: usize,
    /// Probability that a row uses a feature.
    #[arg(long, default_value_t = 0.4)]
    density: f64,
    /// Probability that a factor loads on a dimension (sparse protocol).
    #[arg(long, default_value_t = 0.5)]
    p_factor: f64,
    /// Additive noise standard deviation.
    #[arg(long, default_value_t = 1.0)]
    sigma: f64,
    /// Images protocol: use 4x4 corner blocks with shared support.
    #[arg(long)]
    overlapping: bool,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output data file; `.bin` selects the raw binary format, anything
    /// else CSV.
    #[arg(long)]
    out: PathBuf,
    /// Also draw a holdout mask covering this fraction of columns for the
    /// last half of the rows.
    #[arg(long)]
    mask_frac: Option<f64>,
    /// Where to write the mask (default: `<out>.mask.csv`).
    #[arg(long)]
    mask_out: Option<PathBuf>,
    /// Write the true assignment matrix as CSV.
    #[arg(long)]
    true_z: Option<PathBuf>,
    /// Write the true factor matrix as CSV.
    #[arg(long)]
    true_a: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum OptimizerArg {
    /// Deterministic local search.
    Ls,
    /// Randomized double greedy.
    DoubleGreedy,
    /// Exact enumeration (small k-max only).
    Brute,
}

impl From<OptimizerArg> for RowOptimizer {
    fn from(o: OptimizerArg) -> Self {
        match o {
            OptimizerArg::Ls => RowOptimizer::LocalSearch,
            OptimizerArg::DoubleGreedy => RowOptimizer::DoubleGreedy,
            OptimizerArg::Brute => RowOptimizer::BruteForce,
        }
    }
}

fn parse_scheme(s: &str) -> std::result::Result<PreprocessScheme, String> {
    s.parse::<PreprocessScheme>().map_err(|e| e.to_string())
}

fn parse_gamma_pair(s: &str) -> std::result::Result<GammaPrior, String> {
    let parts: Vec<&str> = s.split(',').collect();
    if parts.len() != 2 {
        return Err(format!("expected SHAPE,RATE, got '{s}'"));
    }
    let shape: f64 = parts[0].trim().parse().map_err(|e| format!("shape: {e}"))?;
    let rate: f64 = parts[1].trim().parse().map_err(|e| format!("rate: {e}"))?;
    GammaPrior::new(shape, rate).map_err(|e| e.to_string())
}

#[derive(Args)]
struct FitArgs {
    /// Data file (CSV or raw binary, detected by content).
    #[arg(long)]
    data: PathBuf,
    /// Holdout mask CSV (`row,col` pairs); masked entries are excluded from
    /// fitting and scored at evaluation.
    #[arg(long)]
    mask: Option<PathBuf>,
    /// Preprocessing applied to observed entries.
    #[arg(long, value_parser = parse_scheme, default_value = "zero-min")]
    preprocess: PreprocessScheme,
    /// Maximum number of latent features.
    #[arg(long)]
    k_max: usize,
    /// Expected number of features a priori.
    #[arg(long, default_value_t = 3.0)]
    alpha: f64,
    /// Noise scale; defaults to ¾ of the observed standard deviation.
    #[arg(long, conflicts_with = "sigma_auto")]
    sigma_x: Option<f64>,
    /// Factor prior scale; defaults to ¾ of the observed standard deviation.
    #[arg(long, conflicts_with = "sigma_auto")]
    sigma_a: Option<f64>,
    /// Derive both scales from the data (the default when neither scale is
    /// given explicitly).
    #[arg(long)]
    sigma_auto: bool,
    /// Place gamma priors on the noise precision, factor precision, and
    /// alpha, and update their posteriors every sweep.
    #[arg(long)]
    hyper_inference: bool,
    /// Gamma prior SHAPE,RATE for the noise precision.
    #[arg(long, value_parser = parse_gamma_pair, default_value = "1,1")]
    prior_tau_x: GammaPrior,
    /// Gamma prior SHAPE,RATE for the factor precision.
    #[arg(long, value_parser = parse_gamma_pair, default_value = "1,1")]
    prior_tau_a: GammaPrior,
    /// Gamma prior SHAPE,RATE for alpha.
    #[arg(long, value_parser = parse_gamma_pair, default_value = "1,1")]
    prior_alpha: GammaPrior,
    /// Row optimizer.
    #[arg(long, value_enum, default_value = "ls")]
    optimizer: OptimizerArg,
    /// Local-search acceptance threshold parameter.
    #[arg(long, default_value_t = 0.1)]
    ls_epsilon: f64,
    /// Local-search removal-round cap.
    #[arg(long, default_value_t = 64)]
    ls_max_passes: usize,
    /// Bernoulli probability of initial assignments.
    #[arg(long, default_value_t = 1.0 / 3.0)]
    init_density: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Relative tolerance of the block convergence rule.
    #[arg(long, default_value_t = 1e-4)]
    tol: f64,
    /// Block size of the convergence rule.
    #[arg(long, default_value_t = 5)]
    block: usize,
    #[arg(long, default_value_t = 200)]
    max_iters: usize,
    #[arg(long, default_value_t = f64::INFINITY)]
    max_seconds: f64,
    /// Per-sweep metrics CSV.
    #[arg(long)]
    metrics: Option<PathBuf>,
    /// Checkpoint written after the fit stops.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Resume from a checkpoint instead of initializing (k-max, hyper, and
    /// seed flags are then taken from the checkpoint).
    #[arg(long)]
    resume: Option<PathBuf>,
    /// Held-out evaluation JSON written after the fit stops.
    #[arg(long)]
    eval_out: Option<PathBuf>,
    /// Include integrated-variance densities in the evaluation.
    #[arg(long)]
    integrated: bool,
    /// Verify maintained caches against recomputation every sweep.
    #[arg(long)]
    debug_recompute: bool,
    /// Suppress per-sweep progress on stderr.
    #[arg(long)]
    quiet: bool,
}

#[derive(Args)]
struct EvalArgs {
    /// Data file the checkpoint was fitted on.
    #[arg(long)]
    data: PathBuf,
    /// Holdout mask CSV; without it nothing is held out and `n_heldout`
    /// reports 0.
    #[arg(long)]
    mask: Option<PathBuf>,
    /// Preprocessing used at fit time.
    #[arg(long, value_parser = parse_scheme, default_value = "zero-min")]
    preprocess: PreprocessScheme,
    #[arg(long)]
    checkpoint: PathBuf,
    /// Report JSON (stdout when omitted).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Include integrated-variance densities.
    #[arg(long)]
    integrated: bool,
}

#[derive(Args)]
struct BenchLsArgs {
    #[arg(long, default_value_t = 2)]
    k_min: usize,
    #[arg(long, default_value_t = 12)]
    k_max: usize,
    /// Generated datasets per K.
    #[arg(long, default_value_t = 5)]
    datasets: usize,
    #[arg(long, default_value_t = 100)]
    n: usize,
    #[arg(long, default_value_t = 50)]
    d: usize,
    #[arg(long, default_value_t = 1.0)]
    sigma: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Report CSV (stdout when omitted).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct BenchScaleArgs {
    /// Comma-separated K grid.
    #[arg(long, value_delimiter = ',', default_values_t = [10usize, 20, 40, 80])]
    k: Vec<usize>,
    #[arg(long, default_value_t = 1000)]
    n: usize,
    #[arg(long, default_value_t = 200)]
    d: usize,
    #[arg(long, default_value_t = 1.0)]
    sigma: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Sweeps measured per K.
    #[arg(long, default_value_t = 3)]
    sweeps: usize,
    /// Report CSV (stdout when omitted).
    #[arg(long)]
    out: Option<PathBuf>,
}

/// Entry point used by the binary.
pub fn run() -> ExitCode {
    run_from(std::env::args_os())
}

/// Parse and execute; factored out so tests can drive the CLI in-process.
pub fn run_from<I, T>(args: I) -> ExitCode
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let outcome = match cli.command {
        Command::Generate(a) => cmd_generate(&a).map(|_| 0),
        Command::Fit(a) => cmd_fit(&a),
        Command::Eval(a) => cmd_eval(&a).map(|_| 0),
        Command::BenchLs(a) => cmd_bench_ls(&a).map(|_| 0),
        Command::BenchScale(a) => cmd_bench_scale(&a).map(|_| 0),
    };
    match outcome {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(error_code(&e))
        }
    }
}

fn error_code(e: &Error) -> u8 {
    match e {
        Error::Numerical(_) | Error::Overflow(_) => 2,
        _ => 1,
    }
}

/// Join relative output paths onto `MEIBP_OUT_DIR` when it is set.
fn out_path(p: &Path) -> PathBuf {
    if p.is_relative() {
        if let Some(dir) = std::env::var_os(OUT_DIR_ENV) {
            return PathBuf::from(dir).join(p);
        }
    }
    p.to_path_buf()
}

fn append_ext(p: &Path, suffix: &str) -> PathBuf {
    let mut s = p.as_os_str().to_os_string();
    s.push(suffix);
    PathBuf::from(s)
}

fn write_matrix(path: &Path, x: &Array2<f64>) -> Result<()> {
    if path.extension().map_or(false, |e| e == "bin") {
        save_matrix_bin(path, x)
    } else {
        save_matrix_csv(path, x)
    }
}

fn bool_to_f64(z: &Array2<bool>) -> Array2<f64> {
    z.map(|&b| if b { 1.0 } else { 0.0 })
}

// ---------------------------------------------------------------------------
// generate
// ---------------------------------------------------------------------------

fn cmd_generate(args: &GenerateArgs) -> Result<()> {
    let (dataset, z, a, spec_json) = match args.protocol {
        Protocol::Sparse => {
            let spec = SparseFactorSpec {
                n_rows: args.n,
                n_cols: args.d,
                k: args.k,
                density: args.density,
                p_factor: args.p_factor,
                sigma_noise: args.sigma,
                seed: args.seed,
            };
            let (ds, z, a) = gen_sparse_factor_data(&spec)?;
            (ds, z, a, serde_json::to_value(&spec)?)
        }
        Protocol::Images => {
            let mut spec = BinaryImagesSpec::new(args.n, args.sigma, args.seed);
            spec.active_prob = args.density;
            spec.overlapping = args.overlapping;
            let (ds, z, a) = gen_binary_images(&spec)?;
            (ds, z, a, serde_json::to_value(&spec)?)
        }
    };

    let data_path = out_path(&args.out);
    write_matrix(&data_path, &dataset.x)?;
    if let Some(p) = &args.true_z {
        save_matrix_csv(out_path(p), &bool_to_f64(&z))?;
    }
    if let Some(p) = &args.true_a {
        save_matrix_csv(out_path(p), &a)?;
    }

    let mask_path = match args.mask_frac {
        Some(frac) => {
            let mask = make_holdout_mask(dataset.n_rows(), dataset.n_cols(), frac, args.seed)?;
            let p = match &args.mask_out {
                Some(p) => out_path(p),
                None => append_ext(&data_path, ".mask.csv"),
            };
            mask.save_csv(&p)?;
            Some(p)
        }
        None => None,
    };

    let meta = serde_json::json!({
        "protocol": match args.protocol { Protocol::Sparse => "sparse", Protocol::Images => "images" },
        "spec": spec_json,
        "mask_frac": args.mask_frac,
        "data": data_path.display().to_string(),
        "mask": mask_path.as_ref().map(|p| p.display().to_string()),
    });
    std::fs::write(append_ext(&data_path, ".meta.json"), serde_json::to_string_pretty(&meta)?)?;
    eprintln!(
        "wrote {} ({}x{}, {} features)",
        data_path.display(),
        dataset.n_rows(),
        dataset.n_cols(),
        z.ncols()
    );
    Ok(())
}

// ---------------------------------------------------------------------------
// fit
// ---------------------------------------------------------------------------

fn load_dataset(
    data: &Path,
    mask: Option<&Path>,
    scheme: PreprocessScheme,
) -> Result<(Dataset, Option<HoldoutMask>)> {
    let x = load_matrix_auto(data)?;
    let (n, d) = x.dim();
    let mask = match mask {
        Some(p) => Some(HoldoutMask::load_csv(p, n, d)?),
        None => None,
    };
    let observed = mask.as_ref().map(|m| {
        let mut o = Array2::from_elem((n, d), true);
        for &(i, j) in &m.entries {
            o[[i as usize, j as usize]] = false;
        }
        o
    });
    Ok((Dataset::new(x, observed, scheme)?, mask))
}

fn metrics_row(r: &SweepReport) -> String {
    let test = r.test_ll_mean.map_or(String::new(), |v| v.to_string());
    format!(
        "{},{},{},{},{},{},{},{}",
        r.iteration, r.seconds, r.elbo, r.train_ll_mean, test, r.k_plus, r.rows_changed, r.gain_evals
    )
}

fn cmd_fit(args: &FitArgs) -> Result<u8> {
    let (dataset, _) = load_dataset(&args.data, args.mask.as_deref(), args.preprocess)?;

    let auto_scale = 0.75 * dataset.observed_std();
    let sigma_x = args.sigma_x.unwrap_or(auto_scale);
    let sigma_a = args.sigma_a.unwrap_or(auto_scale);
    let hyper = if args.hyper_inference {
        Hyperparams::with_gamma(
            args.alpha,
            sigma_x,
            sigma_a,
            GammaPriors {
                tau_x: args.prior_tau_x,
                tau_a: args.prior_tau_a,
                alpha: args.prior_alpha,
            },
        )?
    } else {
        Hyperparams::fixed(args.alpha, sigma_x, sigma_a)?
    };

    let cfg = EngineConfig {
        optimizer: args.optimizer.into(),
        ls: LsConfig {
            epsilon: args.ls_epsilon,
            max_passes: args.ls_max_passes,
            ..LsConfig::default()
        },
        init_density: args.init_density,
        debug_recompute: args.debug_recompute,
        ..EngineConfig::default()
    };
    let mut state = match &args.resume {
        Some(ck) => ModelState::load_checkpoint(ck, dataset, &cfg)?,
        None => ModelState::init(dataset, args.k_max, hyper, &cfg, args.seed)?,
    };

    let conv = ConvergenceConfig {
        tol: args.tol,
        block: args.block,
        max_iters: args.max_iters,
        max_seconds: args.max_seconds,
    };

    let mut metrics_file = match &args.metrics {
        Some(p) => {
            let mut f = std::fs::File::create(out_path(p))?;
            writeln!(f, "{METRICS_HEADER}")?;
            Some(f)
        }
        None => None,
    };
    let quiet = args.quiet;
    let mut io_error: Option<std::io::Error> = None;
    let outcome = state.fit(&conv, |r| {
        if let Some(f) = metrics_file.as_mut() {
            if let Err(e) = writeln!(f, "{}", metrics_row(r)) {
                io_error.get_or_insert(e);
            }
        }
        if !quiet {
            eprintln!(
                "iter {:4}  elbo {:.6}  train_ll {:.6}  K+ {:2}  rows_changed {}",
                r.iteration, r.elbo, r.train_ll_mean, r.k_plus, r.rows_changed
            );
        }
    });
    if let Some(e) = io_error {
        return Err(Error::Io(e));
    }
    let outcome = outcome?;

    if let Some(p) = &args.checkpoint {
        state.save_checkpoint(out_path(p))?;
    }
    if let Some(p) = &args.eval_out {
        let report = predictive_log_likelihood(&state, args.integrated);
        std::fs::write(out_path(p), serde_json::to_string_pretty(&report)?)?;
    }
    if let Some(p) = &args.metrics {
        let meta = serde_json::json!({
            "data": args.data.display().to_string(),
            "mask": args.mask.as_ref().map(|p| p.display().to_string()),
            "preprocess": format!("{:?}", args.preprocess),
            "k_max": state.z.k_max(),
            "alpha": state.hyper.alpha,
            "sigma_x": state.hyper.sigma_x,
            "sigma_a": state.hyper.sigma_a,
            "hyper_inference": state.hyper.hyper_inference(),
            "optimizer": format!("{:?}", cfg.optimizer),
            "seed": args.seed,
            "resumed": args.resume.is_some(),
            "tol": conv.tol,
            "block": conv.block,
            "max_iters": conv.max_iters,
            "status": format!("{:?}", outcome.status),
            "iterations": state.iteration,
        });
        std::fs::write(
            append_ext(&out_path(p), ".meta.json"),
            serde_json::to_string_pretty(&meta)?,
        )?;
    }

    match outcome.status {
        FitStatus::Converged => {
            if !quiet {
                eprintln!("converged after {} iterations", state.iteration);
            }
            Ok(0)
        }
        FitStatus::IterationCap | FitStatus::TimeCap => {
            eprintln!("stopped at cap ({:?}) after {} iterations", outcome.status, state.iteration);
            Ok(3)
        }
    }
}

// ---------------------------------------------------------------------------
// eval
// ---------------------------------------------------------------------------

fn cmd_eval(args: &EvalArgs) -> Result<()> {
    let (dataset, _) = load_dataset(&args.data, args.mask.as_deref(), args.preprocess)?;
    let state = ModelState::load_checkpoint(&args.checkpoint, dataset, &EngineConfig::default())?;
    let report = predictive_log_likelihood(&state, args.integrated);
    let json = serde_json::to_string_pretty(&report)?;
    match &args.out {
        Some(p) => std::fs::write(out_path(p), json)?,
        None => println!("{json}"),
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// benchmarks
// ---------------------------------------------------------------------------

fn write_or_print(out: Option<&Path>, content: &str) -> Result<()> {
    match out {
        Some(p) => std::fs::write(out_path(p), content)?,
        None => print!("{content}"),
    }
    Ok(())
}

fn cmd_bench_ls(args: &BenchLsArgs) -> Result<()> {
    let cfg = bench::BenchLsConfig {
        k_min: args.k_min,
        k_max: args.k_max,
        datasets: args.datasets,
        n_rows: args.n,
        n_cols: args.d,
        sigma_noise: args.sigma,
        seed: args.seed,
        ..bench::BenchLsConfig::default()
    };
    let report = bench::bench_ls(&cfg)?;
    write_or_print(args.out.as_deref(), &report.to_csv())
}

fn cmd_bench_scale(args: &BenchScaleArgs) -> Result<()> {
    let cfg = bench::BenchScaleConfig {
        k_values: args.k.clone(),
        n_rows: args.n,
        n_cols: args.d,
        sigma_noise: args.sigma,
        seed: args.seed,
        sweeps: args.sweeps,
    };
    let report = bench::bench_scale(&cfg)?;
    write_or_print(args.out.as_deref(), &report.to_csv())
}
