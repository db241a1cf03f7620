//! Subcommand implementations; all file emission lives here.

use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::image::{add_gaussian_noise, psnr, Image};
use crate::linop::{decimate_adjoint, Degradation};
use crate::prior::{estimate_hessian_spectral_norm, GsNetwork};
use crate::solver::{
    format_float, rate_bound_check, Solver, SolverTrace, StopReason,
};
use crate::training::{history_to_csv, train, DataSource, TrainConfig};

use super::spec::{
    bicubic_upsample, Assets, RunSpec, SrInit, Task, INPAINT_WARMUP_ITERS, INPAINT_WARMUP_SIGMA,
};

fn exit_code(stop: StopReason) -> i32 {
    match stop {
        StopReason::Converged => 0,
        StopReason::IterationCap => 2,
    }
}

fn write_text(path: &Path, contents: &str) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    std::fs::write(path, contents)?;
    Ok(())
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).expect("summaries serialize");
    text.push('\n');
    write_text(path, &text)
}

fn save_image_pair(image: &Image, dir: &Path, stem: &str) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    crate::io::save_image(image, dir.join(format!("{stem}.gsf")))?;
    let ext = if image.channels() == 1 { "pgm" } else { "ppm" };
    crate::io::save_image(image, dir.join(format!("{stem}.{ext}")))?;
    Ok(())
}

/// Half-gray fill of unobserved pixels: z₀ = Ay + 0.5·(1−A)·1.
fn inpaint_init(y: &Image, mask: &Image) -> Image {
    let plane = y.width() * y.height();
    let mut data = Vec::with_capacity(y.len());
    for c in 0..y.channels() {
        let mc = if mask.channels() == 1 { 0 } else { c };
        let (py, pm) = (y.plane(c), mask.plane(mc));
        for i in 0..plane {
            data.push(if pm[i] == 1.0 { py[i] } else { 0.5 });
        }
    }
    y.with_data(data)
}

pub struct RestoreOutcome {
    pub restored: Image,
    pub observation: Image,
    pub trace: SolverTrace,
    pub psnr_observed: Option<f64>,
    pub psnr_restored: Option<f64>,
}

/// Restoration pipeline shared by restore, sweep and init-robustness:
/// degrade (or accept) the observation, build z₀ for the task, run the
/// solver (with the two-phase σ schedule for inpainting).
pub fn execute_restore(
    spec: &RunSpec,
    assets: &Assets,
    lambda_nu: f64,
    sigma_d: f64,
    init_noise: Option<f64>,
    track_expansiveness: bool,
) -> Result<RestoreOutcome> {
    // High-resolution working grid.
    let grid = if spec.task == Task::Sr && spec.observed {
        Image::zeros(
            assets.input.width() * spec.scale,
            assets.input.height() * spec.scale,
            assets.input.channels(),
        )?
    } else {
        Image::zeros(
            assets.input.width(),
            assets.input.height(),
            assets.input.channels(),
        )?
    };

    let degradation = match spec.task {
        Task::Deblur => Some(Degradation::deblur(
            assets.kernel.clone().ok_or_else(|| missing("kernel"))?,
            grid.width(),
            grid.height(),
        )?),
        Task::Sr => Some(Degradation::super_resolve(
            assets.kernel.clone().ok_or_else(|| missing("kernel"))?,
            spec.scale,
            grid.width(),
            grid.height(),
        )?),
        Task::Inpaint => Some(Degradation::inpaint(
            assets.mask.clone().ok_or_else(|| missing("mask"))?,
        )?),
        Task::DenoiseOnly => None,
    };

    let truth = if spec.observed { None } else { Some(&assets.input) };
    let observation = match (&degradation, truth) {
        (_, None) => assets.input.clone(),
        (None, Some(t)) => add_gaussian_noise(t, spec.nu, spec.seed)?,
        (Some(d), Some(t)) => {
            let clean_obs = d.forward(t)?;
            // The inpainting protocol is noiseless.
            if spec.task == Task::Inpaint {
                clean_obs
            } else {
                add_gaussian_noise(&clean_obs, spec.nu, spec.seed)?
            }
        }
    };

    let psnr_observed = truth
        .filter(|t| t.same_shape(&observation))
        .map(|t| psnr(t, &observation))
        .transpose()?;

    // Denoise-only: one gradient-step denoiser application, no solver.
    let Some(degradation) = degradation else {
        let prior = assets.prior.bind(sigma_d, &grid)?;
        let restored = prior.denoise(&observation)?;
        let psnr_restored = truth.map(|t| psnr(t, &restored)).transpose()?;
        return Ok(RestoreOutcome {
            restored,
            observation,
            trace: empty_trace(),
            psnr_observed,
            psnr_restored,
        });
    };

    let prior = assets.prior.bind(sigma_d, &grid)?;
    let z0_base = match spec.task {
        Task::Deblur => observation.clone(),
        Task::Inpaint => inpaint_init(
            &observation,
            assets.mask.as_ref().expect("validated for inpaint"),
        ),
        Task::Sr => match spec.sr_init {
            SrInit::Adjoint => {
                let filled = decimate_adjoint(&observation, spec.scale)?
                    .scale((spec.scale * spec.scale) as f64);
                prior.denoise(&filled)?
            }
            SrInit::Bicubic => bicubic_upsample(&observation, spec.scale),
        },
        Task::DenoiseOnly => unreachable!(),
    };
    let z0 = match init_noise {
        Some(s) if s > 0.0 => add_gaussian_noise(&z0_base, s, spec.seed.wrapping_add(0x5eed))?,
        _ => z0_base,
    };

    let mut config = spec.solver_config();
    config.lambda = if spec.task == Task::Inpaint { 1.0 } else { lambda_nu };
    config.tau0 = 1.0 / config.lambda;
    config.sigma = sigma_d;

    let (restored, trace) = if spec.task == Task::Inpaint {
        // First iterations at a larger denoiser level, then the target σ.
        let warmup_iters = INPAINT_WARMUP_ITERS.min(config.max_iters);
        let warm_prior = assets.prior.bind(INPAINT_WARMUP_SIGMA, &grid)?;
        let mut warm_cfg = config.clone();
        warm_cfg.max_iters = warmup_iters;
        let mut solver = Solver::new(&degradation, warm_prior.as_ref(), &warm_cfg)
            .with_expansiveness_tracking(track_expansiveness);
        if let Some(t) = truth {
            solver = solver.with_ground_truth(t);
        }
        let warm = solver.run(&observation, &z0)?;

        let mut main_cfg = config.clone();
        main_cfg.max_iters = config.max_iters - warmup_iters;
        let mut solver = Solver::new(&degradation, prior.as_ref(), &main_cfg)
            .with_expansiveness_tracking(track_expansiveness);
        if let Some(t) = truth {
            solver = solver.with_ground_truth(t);
        }
        let main = solver.run(&observation, &warm.restored)?;
        (main.restored, warm.trace.chain(main.trace))
    } else {
        let mut solver = Solver::new(&degradation, prior.as_ref(), &config)
            .with_expansiveness_tracking(track_expansiveness);
        if let Some(t) = truth {
            solver = solver.with_ground_truth(t);
        }
        let run = solver.run(&observation, &z0)?;
        (run.restored, run.trace)
    };

    let psnr_restored = truth.map(|t| psnr(t, &restored)).transpose()?;
    Ok(RestoreOutcome {
        restored,
        observation,
        trace,
        psnr_observed,
        psnr_restored,
    })
}

fn missing(what: &str) -> Error {
    Error::InvalidParameter(format!("missing {what} for this task"))
}

fn empty_trace() -> SolverTrace {
    SolverTrace {
        records: Vec::new(),
        x0_norm_sq: 0.0,
        initial_objective: 0.0,
        final_objective: 0.0,
        stop: StopReason::Converged,
        last_delta: None,
        box_term_activated: false,
        residual_partial_len: 0.0,
    }
}

#[derive(Serialize)]
struct RestoreSummary {
    task: &'static str,
    prior: String,
    nu: f64,
    lambda_nu: f64,
    sigma_d: f64,
    seed: u64,
    iterations: usize,
    total_backtracks: usize,
    stop_reason: &'static str,
    final_objective: f64,
    psnr_observed: Option<f64>,
    psnr_restored: Option<f64>,
}

pub fn cmd_restore(spec: &RunSpec, track_expansiveness: bool) -> Result<i32> {
    spec.validate()?;
    let assets = Assets::load(spec)?;
    let outcome = execute_restore(
        spec,
        &assets,
        spec.lambda_nu,
        spec.sigma_d,
        None,
        track_expansiveness,
    )?;

    save_image_pair(&outcome.observation, &spec.out_dir, "observation")?;
    save_image_pair(&outcome.restored, &spec.out_dir, "restored")?;
    write_text(&spec.out_dir.join("trace.csv"), &outcome.trace.to_csv())?;
    write_json(
        &spec.out_dir.join("summary.json"),
        &RestoreSummary {
            task: spec.task.as_str(),
            prior: assets.prior.describe(),
            nu: spec.nu,
            lambda_nu: spec.lambda_nu,
            sigma_d: spec.sigma_d,
            seed: spec.seed,
            iterations: outcome.trace.iterations(),
            total_backtracks: outcome.trace.total_backtracks(),
            stop_reason: outcome.trace.stop.as_str(),
            final_objective: outcome.trace.final_objective,
            psnr_observed: outcome.psnr_observed,
            psnr_restored: outcome.psnr_restored,
        },
    )?;
    Ok(exit_code(outcome.trace.stop))
}

/// Worker-pool size: explicit flag, then GSPNP_THREADS, then all cores.
fn thread_count(requested: Option<usize>) -> usize {
    requested
        .or_else(|| {
            std::env::var("GSPNP_THREADS")
                .ok()
                .and_then(|v| v.parse().ok())
        })
        .filter(|&n| n > 0)
        .unwrap_or_else(num_cpus)
}

fn num_cpus() -> usize {
    std::thread::available_parallelism()
        .map(|n| n.get())
        .unwrap_or(1)
}

pub fn cmd_sweep(
    spec: &RunSpec,
    lambda_grid: &[f64],
    sigma_ratio_grid: &[f64],
    threads: Option<usize>,
) -> Result<i32> {
    spec.validate()?;
    if lambda_grid.is_empty() || sigma_ratio_grid.is_empty() {
        return Err(Error::InvalidParameter("sweep grids must be nonempty".into()));
    }
    if !(spec.nu > 0.0) {
        return Err(Error::InvalidParameter(
            "sweep varies sigma as a multiple of nu; it needs nu > 0".into(),
        ));
    }
    let assets = Assets::load(spec)?;
    let cells: Vec<(f64, f64)> = lambda_grid
        .iter()
        .flat_map(|&l| sigma_ratio_grid.iter().map(move |&s| (l, s)))
        .collect();

    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(thread_count(threads))
        .build()
        .map_err(|e| Error::InvalidParameter(format!("worker pool: {e}")))?;
    let results: Vec<std::result::Result<(Option<f64>, usize), String>> = pool.install(|| {
        cells
            .par_iter()
            .map(|&(lambda_nu, ratio)| {
                execute_restore(spec, &assets, lambda_nu, ratio * spec.nu, None, false)
                    .map(|o| (o.psnr_restored, o.trace.iterations()))
                    .map_err(|e| e.to_string())
            })
            .collect()
    });

    let mut csv = String::from("lambda_nu,sigma_over_nu,psnr,iterations,status\n");
    for ((lambda_nu, ratio), result) in cells.iter().zip(&results) {
        match result {
            Ok((psnr, iterations)) => csv.push_str(&format!(
                "{},{},{},{},ok\n",
                format_float(*lambda_nu),
                format_float(*ratio),
                psnr.map(format_float).unwrap_or_default(),
                iterations
            )),
            Err(message) => csv.push_str(&format!(
                "{},{},,,error: {}\n",
                format_float(*lambda_nu),
                format_float(*ratio),
                message.replace(',', ";")
            )),
        }
    }
    write_text(&spec.out_dir.join("sweep.csv"), &csv)?;
    Ok(i32::from(results.iter().any(|r| r.is_err())))
}

#[derive(Serialize)]
struct DiagnoseSummary {
    prior: String,
    sigma_d: f64,
    probes: usize,
    lipschitz_max: f64,
    rate_bound_applicable: bool,
    rate_bound_violations: Option<usize>,
    iterations: usize,
}

pub fn cmd_diagnose(spec: &RunSpec, probes: usize, power_iterations: usize) -> Result<i32> {
    spec.validate()?;
    if probes == 0 {
        return Err(Error::InvalidParameter("diagnose needs at least one probe".into()));
    }
    let assets = Assets::load(spec)?;
    let grid = Image::zeros(
        assets.input.width(),
        assets.input.height(),
        assets.input.channels(),
    )?;
    let prior = assets.prior.bind(spec.sigma_d, &grid)?;

    // Spectral-norm estimates of the prior Hessian over noisy probes.
    let mut lipschitz_csv = String::from("probe,sigma,estimate\n");
    let mut lipschitz_max: f64 = 0.0;
    for i in 0..probes {
        let probe = add_gaussian_noise(&assets.input, spec.sigma_d, spec.seed.wrapping_add(i as u64))?;
        let estimate = estimate_hessian_spectral_norm(prior.as_ref(), &probe, power_iterations)?;
        lipschitz_max = lipschitz_max.max(estimate);
        lipschitz_csv.push_str(&format!(
            "{i},{},{}\n",
            format_float(spec.sigma_d),
            format_float(estimate)
        ));
    }
    write_text(&spec.out_dir.join("lipschitz.csv"), &lipschitz_csv)?;

    // A solver run with expansiveness tracking, plus the rate-bound report.
    let outcome = execute_restore(spec, &assets, spec.lambda_nu, spec.sigma_d, None, true)?;
    write_text(&spec.out_dir.join("trace.csv"), &outcome.trace.to_csv())?;

    let taus: Vec<f64> = outcome.trace.records.iter().map(|r| r.tau).collect();
    let fixed_tau = taus.first().copied().filter(|_| {
        taus.windows(2).all(|p| p[0] == p[1])
    });
    let lambda = if spec.task == Task::Inpaint { 1.0 } else { spec.lambda_nu };
    let mut violations = None;
    let applicable = match fixed_tau {
        Some(tau) if outcome.trace.records.len() >= 2 => {
            match rate_bound_check(&outcome.trace, tau, lambda, lipschitz_max) {
                Ok(report) => {
                    let mut csv = String::from("k,gamma_raw,bound,ok\n");
                    let mut min_res = f64::INFINITY;
                    for (idx, r) in outcome.trace.records.iter().enumerate() {
                        min_res = min_res.min(r.residual_sq);
                        let bound = report.numerator / report.denominator / (idx + 1) as f64;
                        csv.push_str(&format!(
                            "{},{},{},{}\n",
                            r.k,
                            format_float(min_res),
                            format_float(bound),
                            min_res <= bound * (1.0 + 1e-9) + 1e-300
                        ));
                    }
                    write_text(&spec.out_dir.join("rate_bound.csv"), &csv)?;
                    violations = Some(report.violations);
                    true
                }
                Err(_) => false,
            }
        }
        _ => false,
    };

    write_json(
        &spec.out_dir.join("summary.json"),
        &DiagnoseSummary {
            prior: assets.prior.describe(),
            sigma_d: spec.sigma_d,
            probes,
            lipschitz_max,
            rate_bound_applicable: applicable,
            rate_bound_violations: violations,
            iterations: outcome.trace.iterations(),
        },
    )?;
    Ok(0)
}

pub fn cmd_init_robustness(spec: &RunSpec, sigma_inits: &[f64]) -> Result<i32> {
    spec.validate()?;
    if sigma_inits.is_empty() {
        return Err(Error::InvalidParameter(
            "init-robustness needs a nonempty sigma-init list".into(),
        ));
    }
    let assets = Assets::load(spec)?;
    let mut csv = String::from("sigma_init,psnr,iterations\n");
    for &sigma_init in sigma_inits {
        let outcome = execute_restore(
            spec,
            &assets,
            spec.lambda_nu,
            spec.sigma_d,
            Some(sigma_init),
            false,
        )?;
        csv.push_str(&format!(
            "{},{},{}\n",
            format_float(sigma_init),
            outcome.psnr_restored.map(format_float).unwrap_or_default(),
            outcome.trace.iterations()
        ));
    }
    write_text(&spec.out_dir.join("init_robustness.csv"), &csv)?;
    Ok(0)
}

/// Resolved train invocation.
pub struct TrainSpec {
    pub out_dir: PathBuf,
    pub gmm: Option<PathBuf>,
    pub patch_size: usize,
    pub channels: usize,
    pub hidden_channels: usize,
    pub layer_count: usize,
    pub kernel_size: usize,
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub sigma_max: f64,
    pub seed: u64,
}

#[derive(Serialize)]
struct TrainSummary {
    steps: usize,
    batch_size: usize,
    learning_rate: f64,
    sigma_max: f64,
    seed: u64,
    parameters: usize,
    final_loss: f64,
}

pub fn cmd_train(args: &TrainSpec) -> Result<i32> {
    let data_source = match &args.gmm {
        Some(path) => {
            let mixture = crate::prior::GaussianMixture::load(path)?;
            DataSource::gmm(mixture, args.patch_size, args.patch_size, args.channels)?
        }
        None => DataSource::synthetic(args.patch_size, args.patch_size, args.channels),
    };
    let cfg = TrainConfig {
        sigma_max: args.sigma_max,
        batch_size: args.batch_size,
        steps: args.steps,
        learning_rate: args.learning_rate,
        seed: args.seed,
        data_source,
    };
    let net = GsNetwork::random(
        args.channels,
        args.hidden_channels,
        args.layer_count,
        args.kernel_size,
        args.seed,
    );
    let outcome = train(&net, &cfg)?;

    std::fs::create_dir_all(&args.out_dir)?;
    outcome.network.save(args.out_dir.join("weights.gsw"))?;
    for checkpoint in &outcome.checkpoints {
        checkpoint
            .network
            .save(args.out_dir.join(format!("weights_step{}.gsw", checkpoint.step)))?;
    }
    write_text(
        &args.out_dir.join("loss_history.csv"),
        &history_to_csv(&outcome.history),
    )?;
    write_json(
        &args.out_dir.join("summary.json"),
        &TrainSummary {
            steps: cfg.steps,
            batch_size: cfg.batch_size,
            learning_rate: cfg.learning_rate,
            sigma_max: cfg.sigma_max,
            seed: cfg.seed,
            parameters: outcome.network.parameter_count(),
            final_loss: outcome.history.last().map(|r| r.loss).unwrap_or(f64::NAN),
        },
    )?;
    Ok(0)
}
