//! Command-line harness: `gen`, `train`, `eval`, `sweep`, `gradcheck`.
//!
//! Exit codes: 0 success, 2 configuration or usage error, 3 runtime
//! failure, 4 a checked threshold was not met.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::error::ErrorKind;
use clap::{Parser, Subcommand};
use thiserror::Error;

use crate::baselines::BaselineError;
use crate::config::{ConfigError, OUT_DIR_ENV, Overrides, RunConfig};
use crate::experiment::{
    Axis, ExperimentError, Scheme, SchemeContext, SweepSpec, dataset_pair, gradcheck, run_scheme, sweep,
    write_metrics_csv, write_sweep_csv,
};
use crate::gnn::GnnParams;
use crate::scenario::Dataset;
use crate::training::{TrainError, train_from};

pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_RUNTIME: i32 = 3;
pub const EXIT_THRESHOLD: i32 = 4;

#[derive(Debug, Parser)]
#[command(
    name = "uavgnn",
    version,
    about = "GNN scheduler for UAV downlink sharing spectrum with D2D links"
)]
pub struct Cli {
    /// TOML run configuration; absent keys take their defaults.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Seed of both the scenario generator and training.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory (overrides the config file and UAVGNN_OUT).
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Overwrite existing output files.
    #[arg(long, global = true)]
    pub force: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate the training and test sets.
    Gen,
    /// Train a network; writes a checkpoint and the training history.
    Train {
        #[arg(long)]
        train_set: Option<PathBuf>,
        #[arg(long)]
        test_set: Option<PathBuf>,
    },
    /// Evaluate one scheme on a test set; writes per-scenario metrics.
    Eval {
        #[arg(long, default_value = "gnn")]
        scheme: Scheme,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        test_set: Option<PathBuf>,
    },
    /// Retrain and evaluate at each value of M or N.
    Sweep {
        #[arg(long)]
        axis: Axis,
        /// Ascending comma-separated values, e.g. 10,20,30.
        #[arg(long, value_delimiter = ',', required = true)]
        values: Vec<usize>,
    },
    /// Compare autodiff gradients with finite differences.
    Gradcheck,
}

#[derive(Debug, Error)]
pub enum CliError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Runtime(String),
    #[error("{0}")]
    Threshold(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) | CliError::Usage(_) => EXIT_CONFIG,
            CliError::Runtime(_) => EXIT_RUNTIME,
            CliError::Threshold(_) => EXIT_THRESHOLD,
        }
    }
}

impl From<ExperimentError> for CliError {
    fn from(e: ExperimentError) -> Self {
        match e {
            ExperimentError::Baseline(BaselineError::TooLarge { .. })
            | ExperimentError::Baseline(BaselineError::Config { .. })
            | ExperimentError::SweepValues
            | ExperimentError::SweepValue(_)
            | ExperimentError::MissingParams => CliError::Usage(e.to_string()),
            ExperimentError::Train(t) => t.into(),
            other => CliError::Runtime(other.to_string()),
        }
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::Config { .. } | TrainError::DatasetMismatch(_) => CliError::Usage(e.to_string()),
            other => CliError::Runtime(other.to_string()),
        }
    }
}

fn runtime(e: impl std::fmt::Display) -> CliError {
    CliError::Runtime(e.to_string())
}

/// Parses `args` and runs the command; `env_out` is the value of the
/// output-directory environment variable.
pub fn run_with<I, T>(args: I, env_out: Option<PathBuf>) -> Result<(), CliError>
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) => {
            print!("{e}");
            return Ok(());
        }
        Err(e) => return Err(CliError::Usage(e.render().to_string().trim_end().to_owned())),
    };
    let over = Overrides {
        seed: cli.seed,
        out_dir: cli.out.clone(),
    };
    let cfg = RunConfig::resolve(cli.config.as_deref(), env_out, &over)?;
    eprintln!("uavgnn {} config_hash {}", crate::VERSION, cfg.hash());
    eprintln!("{}", cfg.to_toml());
    std::fs::create_dir_all(&cfg.out_dir).map_err(|e| runtime(format!("{}: {e}", cfg.out_dir.display())))?;
    match cli.command {
        Command::Gen => cmd_gen(&cfg, cli.force),
        Command::Train { train_set, test_set } => cmd_train(&cfg, train_set, test_set, cli.force),
        Command::Eval {
            scheme,
            checkpoint,
            test_set,
        } => cmd_eval(&cfg, scheme, checkpoint, test_set, cli.force),
        Command::Sweep { axis, values } => cmd_sweep(&cfg, axis, &values, cli.force),
        Command::Gradcheck => cmd_gradcheck(&cfg, cli.force),
    }
}

/// Entry point of the binary; returns the process exit code.
pub fn main_with_env() -> i32 {
    let env_out = std::env::var_os(OUT_DIR_ENV).map(PathBuf::from);
    match run_with(std::env::args_os(), env_out) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

/// Fails before any work starts if an output already exists.
fn refuse_overwrite(paths: &[&Path], force: bool) -> Result<(), CliError> {
    match paths.iter().find(|p| p.exists()) {
        Some(p) if !force => Err(CliError::Usage(format!(
            "{} exists; pass --force to overwrite",
            p.display()
        ))),
        _ => Ok(()),
    }
}

fn create(path: &Path) -> Result<BufWriter<File>, CliError> {
    File::create(path)
        .map(BufWriter::new)
        .map_err(|e| runtime(format!("{}: {e}", path.display())))
}

fn finish(mut w: BufWriter<File>, path: &Path) -> Result<(), CliError> {
    w.flush().map_err(|e| runtime(format!("{}: {e}", path.display())))?;
    eprintln!("wrote {}", path.display());
    Ok(())
}

pub fn train_path(cfg: &RunConfig) -> PathBuf {
    cfg.out_dir.join("train.jsonl")
}

pub fn test_path(cfg: &RunConfig) -> PathBuf {
    cfg.out_dir.join("test.jsonl")
}

pub fn checkpoint_path(cfg: &RunConfig) -> PathBuf {
    cfg.out_dir.join("model.ckpt")
}

fn load_dataset(path: &Path) -> Result<Dataset, CliError> {
    Dataset::load(path).map_err(runtime)
}

fn cmd_gen(cfg: &RunConfig, force: bool) -> Result<(), CliError> {
    let (train, test) = dataset_pair(&cfg.generator, cfg.n_train, cfg.n_test)?;
    let meta_path = cfg.out_dir.join("gen_meta.json");
    let outputs = [train_path(cfg), test_path(cfg), meta_path.clone()];
    refuse_overwrite(&[&outputs[0], &outputs[1], &outputs[2]], force)?;
    for (ds, path) in [(&train, &outputs[0]), (&test, &outputs[1])] {
        let mut w = create(path)?;
        ds.write_to(&mut w).map_err(runtime)?;
        finish(w, path)?;
    }
    let meta = serde_json::json!({
        "tool": "uavgnn",
        "tool_version": crate::VERSION,
        "config_hash": cfg.hash(),
        "config": cfg,
        "train_records": train.len(),
        "test_records": test.len(),
    });
    let mut w = create(&meta_path)?;
    writeln!(w, "{}", serde_json::to_string_pretty(&meta).expect("json")).map_err(runtime)?;
    finish(w, &meta_path)
}

fn cmd_train(
    cfg: &RunConfig,
    train_set: Option<PathBuf>,
    test_set: Option<PathBuf>,
    force: bool,
) -> Result<(), CliError> {
    let ckpt = checkpoint_path(cfg);
    let hist = cfg.out_dir.join("history.csv");
    refuse_overwrite(&[&ckpt, &hist], force)?;
    let tr = load_dataset(&train_set.unwrap_or_else(|| train_path(cfg)))?;
    let te = load_dataset(&test_set.unwrap_or_else(|| test_path(cfg)))?;
    let init = GnnParams::init(cfg.architecture(), cfg.train.seed);
    let (params, history) = train_from(init, &tr, &te, &cfg.train, |r| {
        eprintln!(
            "iter {:>5}  train_loss {:>10.4}  test_sum_rate {:>8.4}  violations {:.3}  {:.1}s",
            r.iter, r.train_loss, r.test_sum_rate, r.violations, r.seconds
        );
    })?;
    params.save(&ckpt, Some(&cfg.to_json())).map_err(runtime)?;
    eprintln!("wrote {}", ckpt.display());
    let mut w = create(&hist)?;
    history.write_csv(&mut w, &cfg.provenance()).map_err(runtime)?;
    finish(w, &hist)
}

fn cmd_eval(
    cfg: &RunConfig,
    scheme: Scheme,
    checkpoint: Option<PathBuf>,
    test_set: Option<PathBuf>,
    force: bool,
) -> Result<(), CliError> {
    let out = cfg.out_dir.join(format!("metrics_{scheme}.csv"));
    refuse_overwrite(&[&out], force)?;
    let te = load_dataset(&test_set.unwrap_or_else(|| test_path(cfg)))?;
    let params = match scheme {
        Scheme::Gnn => {
            let path = checkpoint.unwrap_or_else(|| checkpoint_path(cfg));
            Some(GnnParams::load(&path, &cfg.architecture()).map_err(runtime)?)
        }
        _ => None,
    };
    let ctx = SchemeContext {
        params: params.as_ref(),
        ao: &cfg.ao,
        grid: &cfg.grid,
        alpha: cfg.train.alpha,
        seed: cfg.generator.seed,
    };
    let (_, report) = run_scheme(scheme, &te, &ctx)?;
    let mut w = create(&out)?;
    write_metrics_csv(&mut w, scheme, &report, &cfg.provenance()).map_err(runtime)?;
    finish(w, &out)?;
    println!(
        "{scheme}: mean_sum_rate {:.6} std {:.6} qos_satisfied {:.4} mean_violations {:.4} alpha {}",
        report.mean_sum_rate, report.std_sum_rate, report.qos_satisfied, report.mean_violations, cfg.train.alpha
    );
    Ok(())
}

fn cmd_sweep(cfg: &RunConfig, axis: Axis, values: &[usize], force: bool) -> Result<(), CliError> {
    let out = cfg.out_dir.join(format!("sweep_{axis}.csv"));
    refuse_overwrite(&[&out], force)?;
    let arch = cfg.architecture();
    let spec = SweepSpec {
        axis,
        values,
        generator: &cfg.generator,
        train: &cfg.train,
        ao: &cfg.ao,
        grid: &cfg.grid,
        arch: &arch,
        n_train: cfg.n_train,
        n_test: cfg.n_test,
        baselines: &[Scheme::Random, Scheme::FixedPower, Scheme::Ao],
    };
    let points = sweep(&spec, |p| {
        let line: Vec<String> = p
            .reports
            .iter()
            .map(|(s, r)| format!("{s} {:.4}", r.mean_sum_rate))
            .collect();
        eprintln!("{axis}={}: {}", p.value, line.join("  "));
    })?;
    let hashes: Vec<String> = points
        .iter()
        .map(|p| {
            RunConfig {
                generator: p.generator.clone(),
                ..cfg.clone()
            }
            .hash()
        })
        .collect();
    let mut w = create(&out)?;
    write_sweep_csv(&mut w, axis, &points, &hashes, &cfg.provenance()).map_err(runtime)?;
    finish(w, &out)
}

fn cmd_gradcheck(cfg: &RunConfig, force: bool) -> Result<(), CliError> {
    let out = cfg.out_dir.join("gradcheck.csv");
    refuse_overwrite(&[&out], force)?;
    let g = &cfg.gradcheck;
    let report = gradcheck(&cfg.generator, &cfg.architecture(), cfg.train.alpha, g)?;
    let mut w = create(&out)?;
    for line in cfg.provenance() {
        writeln!(w, "# {line}").map_err(runtime)?;
    }
    writeln!(w, "block,checked").map_err(runtime)?;
    for (name, n) in &report.blocks {
        writeln!(w, "{name},{n}").map_err(runtime)?;
        println!("{name:<32} {n:>5} checked");
    }
    writeln!(w, "# max_rel_err {:e}", report.max_rel_err).map_err(runtime)?;
    finish(w, &out)?;
    println!(
        "max relative error {:e} over {} coordinates ({} excluded at kinks), threshold {:e}",
        report.max_rel_err, report.checked, report.excluded, g.threshold
    );
    if report.max_rel_err >= g.threshold {
        return Err(CliError::Threshold(format!(
            "gradient check failed: max relative error {:e} >= {:e}",
            report.max_rel_err, g.threshold
        )));
    }
    Ok(())
}
