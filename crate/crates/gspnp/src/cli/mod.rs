//! Command-line front end.
//!
//! Subcommands: `restore`, `train`, `sweep`, `diagnose`, `init-robustness`.
//! Flags can also come from a flat `key = value` config file (`--config`);
//! explicit flags override file values, which override per-task defaults.
//! `GSPNP_THREADS` caps the sweep worker pool.

mod commands;
mod spec;

use std::ffi::OsString;
use std::path::PathBuf;
use std::str::FromStr;

use clap::{Args, Parser, Subcommand};

use crate::error::{Error, Result};

pub use commands::{execute_restore, RestoreOutcome, TrainSpec};
pub use spec::{Assets, PriorKind, RunSpec, SrInit, Task, TaskDefaults};

#[derive(Parser, Debug)]
#[command(
    name = "gspnp",
    version,
    about = "Gradient-step plug-and-play image restoration"
)]
pub struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Restore a degraded image (deblur, sr, inpaint, denoise-only).
    Restore(RestoreArgs),
    /// Train the network prior by denoising score matching.
    Train(TrainArgs),
    /// Grid sweep over lambda-nu and sigma/nu; one restoration per cell.
    Sweep(SweepArgs),
    /// Lipschitz estimates, expansiveness along a run, rate-bound report.
    Diagnose(DiagnoseArgs),
    /// Re-run a restoration from noisy initializations z0 = y + noise.
    InitRobustness(InitRobustnessArgs),
}

#[derive(Args, Debug, Clone)]
struct CommonArgs {
    /// Task: deblur, sr, inpaint or denoise-only.
    #[arg(long)]
    task: Option<String>,

    /// Input image (.gsf, .pgm or .ppm). Treated as the ground truth to
    /// degrade unless --observed is set.
    #[arg(long)]
    input: Option<PathBuf>,

    /// Blur kernel file (deblur and sr).
    #[arg(long)]
    kernel: Option<PathBuf>,

    /// Mask PGM, 0 = missing and 255 = observed (inpaint).
    #[arg(long)]
    mask: Option<PathBuf>,

    /// Network prior weights (GSW container).
    #[arg(long)]
    weights: Option<PathBuf>,

    /// Gaussian-mixture prior parameters (text format).
    #[arg(long)]
    gmm: Option<PathBuf>,

    /// Quadratic-prior weight, used when neither --weights nor --gmm is
    /// given.
    #[arg(long)]
    alpha: Option<f64>,

    /// Observation noise standard deviation.
    #[arg(long)]
    nu: Option<f64>,

    /// Super-resolution scale.
    #[arg(long)]
    scale: Option<usize>,

    /// Regularization trade-off in the scaled formulation.
    #[arg(long = "lambda-nu")]
    lambda_nu: Option<f64>,

    /// Denoiser noise level; defaults to the task's multiple of nu.
    #[arg(long = "sigma-d")]
    sigma_d: Option<f64>,

    /// Backtracking shrink factor.
    #[arg(long)]
    eta: Option<f64>,

    /// Sufficient-decrease factor.
    #[arg(long)]
    gamma: Option<f64>,

    /// Relative-decrease stopping threshold.
    #[arg(long)]
    eps: Option<f64>,

    /// Iteration cap.
    #[arg(long = "max-iter")]
    max_iter: Option<usize>,

    #[arg(long)]
    seed: Option<u64>,

    #[arg(long = "out-dir")]
    out_dir: Option<PathBuf>,

    /// Flat key = value file supplying any of the flags above.
    #[arg(long)]
    config: Option<PathBuf>,

    /// The input is the observation itself (skip degradation and PSNR).
    #[arg(long)]
    observed: bool,

    /// Augment the regularizer with the [-1,2] box term.
    #[arg(long = "box-projection")]
    box_projection: bool,

    /// Skip the final extra gradient step.
    #[arg(long = "no-final-step")]
    no_final_step: bool,

    /// Super-resolution initializer: adjoint (default) or bicubic.
    #[arg(long = "sr-init")]
    sr_init: Option<String>,
}

#[derive(Args, Debug)]
struct RestoreArgs {
    #[command(flatten)]
    common: CommonArgs,

    /// Record the denoiser expansiveness ratio along the run.
    #[arg(long)]
    expansiveness: bool,
}

#[derive(Args, Debug)]
struct SweepArgs {
    #[command(flatten)]
    common: CommonArgs,

    /// Comma-separated lambda-nu values.
    #[arg(long = "lambda-grid")]
    lambda_grid: Option<String>,

    /// Comma-separated sigma/nu ratios.
    #[arg(long = "sigma-grid")]
    sigma_grid: Option<String>,

    /// Worker pool size (default: GSPNP_THREADS or all cores).
    #[arg(long)]
    threads: Option<usize>,
}

#[derive(Args, Debug)]
struct DiagnoseArgs {
    #[command(flatten)]
    common: CommonArgs,

    /// Number of noisy probe images for the Lipschitz histogram.
    #[arg(long)]
    probes: Option<usize>,

    /// Power iterations per spectral-norm estimate.
    #[arg(long = "power-iterations")]
    power_iterations: Option<usize>,
}

#[derive(Args, Debug)]
struct InitRobustnessArgs {
    #[command(flatten)]
    common: CommonArgs,

    /// Comma-separated sigma_init values for z0 = y + noise.
    #[arg(long = "sigma-init-grid")]
    sigma_init_grid: Option<String>,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[arg(long = "out-dir")]
    out_dir: Option<PathBuf>,

    /// Train on samples of this mixture instead of synthetic images.
    #[arg(long)]
    gmm: Option<PathBuf>,

    /// Square patch edge length.
    #[arg(long = "patch-size")]
    patch_size: Option<usize>,

    #[arg(long)]
    channels: Option<usize>,

    #[arg(long = "hidden-channels")]
    hidden_channels: Option<usize>,

    #[arg(long)]
    layers: Option<usize>,

    #[arg(long = "kernel-size")]
    kernel_size: Option<usize>,

    #[arg(long)]
    steps: Option<usize>,

    #[arg(long = "batch-size")]
    batch_size: Option<usize>,

    #[arg(long)]
    lr: Option<f64>,

    /// Upper bound of the training noise range.
    #[arg(long = "sigma-max")]
    sigma_max: Option<f64>,

    #[arg(long)]
    seed: Option<u64>,

    #[arg(long)]
    config: Option<PathBuf>,
}

/// Config-file lookup with typed parsing; CLI values take precedence via
/// `Option::or`-style merging at the call sites.
struct FileConfig {
    pairs: Vec<(String, String)>,
    path: Option<PathBuf>,
}

impl FileConfig {
    fn load(path: Option<&PathBuf>) -> Result<FileConfig> {
        let pairs = match path {
            Some(p) => spec::read_config_file(p)?,
            None => Vec::new(),
        };
        Ok(FileConfig {
            pairs,
            path: path.cloned(),
        })
    }

    fn raw(&self, key: &str) -> Option<&str> {
        self.pairs
            .iter()
            .rev()
            .find(|(k, _)| k == key)
            .map(|(_, v)| v.as_str())
    }

    fn get<T: FromStr>(&self, key: &str) -> Result<Option<T>> {
        match self.raw(key) {
            None => Ok(None),
            Some(text) => text.parse::<T>().map(Some).map_err(|_| {
                Error::malformed(
                    self.path.clone().unwrap_or_default(),
                    format!("bad value {text:?} for key {key}"),
                )
            }),
        }
    }

    fn get_flag(&self, key: &str) -> Result<bool> {
        Ok(self.get::<bool>(key)?.unwrap_or(false))
    }
}

fn resolve_spec(common: &CommonArgs) -> Result<RunSpec> {
    let file = FileConfig::load(common.config.as_ref())?;

    let task_name = common
        .task
        .clone()
        .or(file.get::<String>("task")?)
        .unwrap_or_else(|| "deblur".to_string());
    let task = Task::parse(&task_name)?;
    let defaults = TaskDefaults::for_task(task);

    let nu = common
        .nu
        .or(file.get("nu")?)
        .unwrap_or(if task == Task::Inpaint { 0.0 } else { 0.03 });
    let sigma_d = common
        .sigma_d
        .or(file.get("sigma-d")?)
        .or(defaults.sigma_d)
        .unwrap_or(defaults.sigma_over_nu * nu);

    let input = common
        .input
        .clone()
        .or(file.get("input")?)
        .ok_or_else(|| Error::InvalidParameter("--input is required".into()))?;

    let sr_init_name = common
        .sr_init
        .clone()
        .or(file.get::<String>("sr-init")?)
        .unwrap_or_else(|| "adjoint".to_string());
    let sr_init = match sr_init_name.as_str() {
        "adjoint" => SrInit::Adjoint,
        "bicubic" => SrInit::Bicubic,
        other => {
            return Err(Error::InvalidParameter(format!(
                "unknown sr-init {other:?} (expected adjoint or bicubic)"
            )))
        }
    };

    Ok(RunSpec {
        task,
        input,
        kernel: common.kernel.clone().or(file.get("kernel")?),
        mask: common.mask.clone().or(file.get("mask")?),
        weights: common.weights.clone().or(file.get("weights")?),
        gmm: common.gmm.clone().or(file.get("gmm")?),
        alpha: common.alpha.or(file.get("alpha")?).unwrap_or(1.0),
        nu,
        scale: common.scale.or(file.get("scale")?).unwrap_or(2),
        lambda_nu: common
            .lambda_nu
            .or(file.get("lambda-nu")?)
            .unwrap_or(defaults.lambda_nu),
        sigma_d,
        eta: common.eta.or(file.get("eta")?).unwrap_or(0.9),
        gamma: common.gamma.or(file.get("gamma")?).unwrap_or(0.1),
        eps: common.eps.or(file.get("eps")?).unwrap_or(defaults.eps),
        max_iter: common
            .max_iter
            .or(file.get("max-iter")?)
            .unwrap_or(defaults.max_iter),
        seed: common.seed.or(file.get("seed")?).unwrap_or(0),
        out_dir: common
            .out_dir
            .clone()
            .or(file.get("out-dir")?)
            .unwrap_or_else(|| PathBuf::from("gspnp-out")),
        observed: common.observed || file.get_flag("observed")?,
        box_projection: common.box_projection || file.get_flag("box-projection")?,
        final_gradient_step: !(common.no_final_step || file.get_flag("no-final-step")?)
            && defaults.final_gradient_step,
        sr_init,
    })
}

fn resolve_train(args: &TrainArgs) -> Result<TrainSpec> {
    let file = FileConfig::load(args.config.as_ref())?;
    Ok(TrainSpec {
        out_dir: args
            .out_dir
            .clone()
            .or(file.get("out-dir")?)
            .unwrap_or_else(|| PathBuf::from("gspnp-train")),
        gmm: args.gmm.clone().or(file.get("gmm")?),
        patch_size: args.patch_size.or(file.get("patch-size")?).unwrap_or(16),
        channels: args.channels.or(file.get("channels")?).unwrap_or(1),
        hidden_channels: args
            .hidden_channels
            .or(file.get("hidden-channels")?)
            .unwrap_or(16),
        layer_count: args.layers.or(file.get("layers")?).unwrap_or(4),
        kernel_size: args.kernel_size.or(file.get("kernel-size")?).unwrap_or(3),
        steps: args.steps.or(file.get("steps")?).unwrap_or(2000),
        batch_size: args.batch_size.or(file.get("batch-size")?).unwrap_or(16),
        learning_rate: args.lr.or(file.get("lr")?).unwrap_or(1e-3),
        sigma_max: args
            .sigma_max
            .or(file.get("sigma-max")?)
            .unwrap_or(50.0 / 255.0),
        seed: args.seed.or(file.get("seed")?).unwrap_or(0),
    })
}

fn parse_grid(text: &str, what: &str) -> Result<Vec<f64>> {
    text.split(',')
        .map(|t| t.trim())
        .filter(|t| !t.is_empty())
        .map(|t| {
            t.parse::<f64>()
                .map_err(|_| Error::InvalidParameter(format!("bad {what} entry {t:?}")))
        })
        .collect()
}

fn dispatch(cli: Cli) -> Result<i32> {
    match cli.command {
        Command::Restore(args) => {
            let spec = resolve_spec(&args.common)?;
            commands::cmd_restore(&spec, args.expansiveness)
        }
        Command::Train(args) => commands::cmd_train(&resolve_train(&args)?),
        Command::Sweep(args) => {
            let spec = resolve_spec(&args.common)?;
            let lambda_grid = parse_grid(
                args.lambda_grid.as_deref().unwrap_or("0.05,0.1,0.5,10"),
                "lambda-grid",
            )?;
            let sigma_grid = parse_grid(
                args.sigma_grid.as_deref().unwrap_or("1.0,1.8,4.0,10.0"),
                "sigma-grid",
            )?;
            commands::cmd_sweep(&spec, &lambda_grid, &sigma_grid, args.threads)
        }
        Command::Diagnose(args) => {
            let spec = resolve_spec(&args.common)?;
            commands::cmd_diagnose(
                &spec,
                args.probes.unwrap_or(8),
                args.power_iterations.unwrap_or(30),
            )
        }
        Command::InitRobustness(args) => {
            let spec = resolve_spec(&args.common)?;
            let grid = parse_grid(
                args.sigma_init_grid.as_deref().unwrap_or("0,0.02,0.05,0.1"),
                "sigma-init-grid",
            )?;
            commands::cmd_init_robustness(&spec, &grid)
        }
    }
}

/// Parses and runs a full command line (first element is the program
/// name); returns the process exit code. Used by the binary and by tests.
pub fn run_from<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            // clap handles --help/--version through this path.
            let _ = e.print();
            return e.exit_code();
        }
    };
    match dispatch(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}

/// Entry point for the `gspnp` binary.
pub fn run_cli() -> i32 {
    run_from(std::env::args_os())
}
