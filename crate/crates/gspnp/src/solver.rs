//! Proximal gradient descent with a gradient-step denoiser.
//!
//! One iteration is `x_{k+1} = Prox_{τf}(x_k − τλ∇g_σ(x_k))`; since the
//! gradient step equals `τλ·D_σ + (1−τλ)·Id`, the scheme plugs the denoiser
//! into a PGD whose objective `F = f + λg_σ` is explicit. Armijo
//! backtracking shrinks τ until the sufficient decrease
//! `F(x_k) − F(x_{k+1}) ≥ (γ/τ)‖x_{k+1}−x_k‖²` holds; τ never grows back
//! within a run. An optional final gradient step discards the residual
//! noise of the last proximal step, and an optional box term keeps the
//! objective coercive.

use crate::error::{Error, Result};
use crate::image::{psnr, Image};
use crate::linop::Degradation;
use crate::prior::GradientPrior;

const MAX_SHRINKS: usize = 200;

/// 17 significant digits, the trace CSV float format.
pub fn format_float(v: f64) -> String {
    format!("{v:.16e}")
}

/// All Algorithm parameters. The scaled formulation is canonical: the
/// caller supplies λ_ν (= ν²λ) as `lambda` and the data fidelity is
/// `½‖Ax−y‖²`; [`SolverConfig::scaled`] then sets τ₀ = 1/λ_ν so the first
/// gradient step is exactly one denoiser application.
#[derive(Debug, Clone)]
pub struct SolverConfig {
    /// Regularization trade-off λ (λ_ν in the scaled formulation).
    pub lambda: f64,
    /// Denoiser noise level; informational (the prior carries its own σ).
    pub sigma: f64,
    /// Initial stepsize.
    pub tau0: f64,
    /// Backtracking shrink factor, in (0,1).
    pub eta: f64,
    /// Sufficient-decrease factor, in (0,½).
    pub gamma: f64,
    /// Relative-decrease stopping threshold.
    pub eps: f64,
    /// Iteration cap K.
    pub max_iters: usize,
    /// Augment g with ½‖x−Π_C(x)‖², C = [−1,2]ⁿ.
    pub box_projection: bool,
    /// Apply `Id − λτ∇g` once after the loop.
    pub final_gradient_step: bool,
    /// Armijo backtracking; disabled only for the noiseless inpainting
    /// protocol, which keeps a fixed stepsize.
    pub backtracking: bool,
}

impl SolverConfig {
    /// Defaults of the deblurring protocol for a given λ_ν and σ.
    pub fn scaled(lambda_nu: f64, sigma: f64) -> Self {
        SolverConfig {
            lambda: lambda_nu,
            sigma,
            tau0: 1.0 / lambda_nu,
            eta: 0.9,
            gamma: 0.1,
            eps: 1e-5,
            max_iters: 400,
            box_projection: false,
            final_gradient_step: true,
            backtracking: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidParameter(msg));
        if !(self.lambda >= 0.0) || !self.lambda.is_finite() {
            return bad(format!("lambda must be finite and nonnegative, got {}", self.lambda));
        }
        if !(self.sigma >= 0.0) || !self.sigma.is_finite() {
            return bad(format!("sigma must be finite and nonnegative, got {}", self.sigma));
        }
        if !(self.tau0 > 0.0) || !self.tau0.is_finite() {
            return bad(format!("tau0 must be positive, got {}", self.tau0));
        }
        if !(self.eta > 0.0 && self.eta < 1.0) {
            return bad(format!("eta must lie in (0,1), got {}", self.eta));
        }
        if !(self.gamma > 0.0 && self.gamma < 0.5) {
            return bad(format!("gamma must lie in (0,1/2), got {}", self.gamma));
        }
        if !(self.eps >= 0.0) {
            return bad(format!("eps must be nonnegative, got {}", self.eps));
        }
        Ok(())
    }
}

/// Why a run stopped.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StopReason {
    /// Relative objective decrease fell below ε.
    Converged,
    /// Iteration cap K reached.
    IterationCap,
}

impl StopReason {
    pub fn as_str(&self) -> &'static str {
        match self {
            StopReason::Converged => "converged",
            StopReason::IterationCap => "iteration-cap",
        }
    }
}

/// One accepted iteration: the state at x_k and the step taken from it.
#[derive(Debug, Clone)]
pub struct IterationRecord {
    pub k: usize,
    /// F(x_k).
    pub objective: f64,
    /// f(x_k).
    pub fidelity: f64,
    /// g_σ(x_k) (box term included when enabled).
    pub regularizer: f64,
    /// Stepsize accepted for the step x_k → x_{k+1}.
    pub tau: f64,
    /// ‖x_{k+1} − x_k‖².
    pub residual_sq: f64,
    /// Running min_{i≤k}‖x_{i+1}−x_i‖² / ‖x₀‖².
    pub gamma_k: f64,
    /// Backtracking shrinks spent on this step.
    pub backtracks: usize,
    /// PSNR of x_k against the ground truth, when provided.
    pub psnr: Option<f64>,
    /// ‖D(x_{k+1})−D(x_k)‖/‖x_{k+1}−x_k‖, when tracked.
    pub expansiveness: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct SolverTrace {
    pub records: Vec<IterationRecord>,
    /// ‖x₀‖², the γ_k normalizer.
    pub x0_norm_sq: f64,
    /// F(x₀), the Δ normalizer.
    pub initial_objective: f64,
    /// F at the last accepted iterate (the limit surrogate).
    pub final_objective: f64,
    pub stop: StopReason,
    /// Last relative decrease Δ, if any step was taken.
    pub last_delta: Option<f64>,
    /// Whether the box term was ever nonzero along the run.
    pub box_term_activated: bool,
    /// Σ_k ‖x_{k+1}−x_k‖; reported for inspection (finite-length behavior
    /// has no finite-time test).
    pub residual_partial_len: f64,
}

impl SolverTrace {
    pub fn iterations(&self) -> usize {
        self.records.len()
    }

    pub fn total_backtracks(&self) -> usize {
        self.records.iter().map(|r| r.backtracks).sum()
    }

    /// CSV with one header row; floats at 17 significant digits; empty
    /// fields for untracked optionals.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("k,F,f,g,tau,residual_sq,gamma_k,backtracks,psnr,expansiveness\n");
        for r in &self.records {
            out.push_str(&format!(
                "{},{},{},{},{},{},{},{},{},{}\n",
                r.k,
                format_float(r.objective),
                format_float(r.fidelity),
                format_float(r.regularizer),
                format_float(r.tau),
                format_float(r.residual_sq),
                format_float(r.gamma_k),
                r.backtracks,
                r.psnr.map(format_float).unwrap_or_default(),
                r.expansiveness.map(format_float).unwrap_or_default(),
            ));
        }
        out
    }

    /// Concatenates a follow-up phase (e.g. the σ switch of the inpainting
    /// protocol): iterations renumbered, γ_k recomputed as one running min
    /// against this trace's ‖x₀‖².
    pub fn chain(mut self, other: SolverTrace) -> SolverTrace {
        let offset = self.records.len();
        let mut min_res = self
            .records
            .iter()
            .map(|r| r.residual_sq)
            .fold(f64::INFINITY, f64::min);
        let norm = self.x0_norm_sq.max(f64::MIN_POSITIVE);
        for mut r in other.records {
            r.k += offset;
            min_res = min_res.min(r.residual_sq);
            r.gamma_k = min_res / norm;
            self.records.push(r);
        }
        SolverTrace {
            records: self.records,
            x0_norm_sq: self.x0_norm_sq,
            initial_objective: self.initial_objective,
            final_objective: other.final_objective,
            stop: other.stop,
            last_delta: other.last_delta,
            box_term_activated: self.box_term_activated || other.box_term_activated,
            residual_partial_len: self.residual_partial_len + other.residual_partial_len,
        }
    }
}

/// Clamps every sample to the box C = [−1,2].
pub fn box_project(x: &Image) -> Image {
    x.map(|v| v.clamp(-1.0, 2.0))
}

/// Gradient of ½‖x−Π_C(x)‖²: the outward part x − Π_C(x).
pub fn box_gradient_term(x: &Image) -> Image {
    x.map(|v| v - v.clamp(-1.0, 2.0))
}

/// Objective F(x) = f(x) + λ·g_σ(x); the inpainting indicator propagates as
/// +∞ off the constraint.
pub fn objective(
    x: &Image,
    degradation: &Degradation,
    y: &Image,
    prior: &dyn GradientPrior,
    lambda: f64,
) -> Result<f64> {
    if !(lambda >= 0.0) {
        return Err(Error::InvalidParameter(format!(
            "lambda must be nonnegative, got {lambda}"
        )));
    }
    let f = degradation.data_fidelity(x, y)?;
    if f.is_infinite() {
        return Ok(f64::INFINITY);
    }
    Ok(f + lambda * prior.energy(x)?)
}

/// One iteration map: `Prox_{τf}(x − τλ∇g_σ(x))`.
pub fn gs_pnp_step(
    x: &Image,
    tau: f64,
    lambda: f64,
    prior: &dyn GradientPrior,
    degradation: &Degradation,
    y: &Image,
) -> Result<Image> {
    if !(tau > 0.0) {
        return Err(Error::InvalidParameter(format!(
            "stepsize must be positive, got {tau}"
        )));
    }
    let z = x.add_scaled(&prior.grad(x)?, -tau * lambda);
    degradation.prox(&z, y, tau)
}

/// The problem instance with the optional box augmentation folded into the
/// regularizer.
struct Problem<'a> {
    degradation: &'a Degradation,
    y: &'a Image,
    prior: &'a dyn GradientPrior,
    lambda: f64,
    box_projection: bool,
}

impl Problem<'_> {
    /// (F, f, g_eff) at x.
    fn objective_parts(&self, x: &Image) -> Result<(f64, f64, f64)> {
        let f = self.degradation.data_fidelity(x, self.y)?;
        let mut g = self.prior.energy(x)?;
        if self.box_projection {
            g += 0.5 * box_gradient_term(x).norm_sq();
        }
        let total = if f.is_infinite() { f64::INFINITY } else { f + self.lambda * g };
        Ok((total, f, g))
    }

    /// Effective prior gradient and whether the box term fired.
    fn prior_gradient(&self, x: &Image) -> Result<(Image, bool)> {
        let mut grad = self.prior.grad(x)?;
        let mut active = false;
        if self.box_projection {
            let term = box_gradient_term(x);
            active = term.data().iter().any(|&v| v != 0.0);
            if active {
                grad = grad.add(&term);
            }
        }
        Ok((grad, active))
    }

    fn step(&self, x: &Image, grad: &Image, tau: f64) -> Result<Image> {
        let z = x.add_scaled(grad, -tau * self.lambda);
        self.degradation.prox(&z, self.y, tau)
    }

    /// Shrinks τ geometrically until the sufficient decrease holds; returns
    /// the accepted candidate, its objective parts, the accepted τ and the
    /// shrink count.
    #[allow(clippy::type_complexity)]
    fn backtrack(
        &self,
        x: &Image,
        objective_x: f64,
        grad: &Image,
        tau_in: f64,
        eta: f64,
        gamma: f64,
    ) -> Result<(Image, (f64, f64, f64), f64, usize)> {
        let mut tau = tau_in;
        let mut shrinks = 0;
        // F(x) − F(candidate) carries ~1e-16·|F| of cancellation noise; at
        // numerical convergence both sides of the Armijo test sit below it,
        // so acceptance tolerates that floor (the descent guarantee becomes
        // F(x_{k+1}) ≤ F(x_k)·(1 + 1e-12), which is what the convergence
        // diagnostics assert).
        let noise_floor = 1e-12 * objective_x.abs();
        loop {
            let candidate = self.step(x, grad, tau)?;
            let parts = self.objective_parts(&candidate)?;
            let decrease = objective_x - parts.0;
            let threshold = gamma / tau * candidate.sub(x).norm_sq();
            if parts.0.is_finite() && decrease >= threshold - noise_floor {
                return Ok((candidate, parts, tau, shrinks));
            }
            shrinks += 1;
            if shrinks > MAX_SHRINKS {
                return Err(Error::BacktrackStalled {
                    max_shrinks: MAX_SHRINKS,
                    tau,
                });
            }
            tau *= eta;
        }
    }
}

/// Outcome of one backtracked step.
#[derive(Debug)]
pub struct BacktrackResult {
    pub accepted: Image,
    pub tau: f64,
    pub shrinks: usize,
    pub objective_before: f64,
    pub objective_after: f64,
}

/// Standalone backtracked step from x at τ_in (no box augmentation).
pub fn backtrack(
    x: &Image,
    tau_in: f64,
    y: &Image,
    degradation: &Degradation,
    prior: &dyn GradientPrior,
    lambda: f64,
    eta: f64,
    gamma: f64,
) -> Result<BacktrackResult> {
    if !(tau_in > 0.0) {
        return Err(Error::InvalidParameter(format!(
            "stepsize must be positive, got {tau_in}"
        )));
    }
    let problem = Problem {
        degradation,
        y,
        prior,
        lambda,
        box_projection: false,
    };
    let (objective_before, _, _) = problem.objective_parts(x)?;
    let (grad, _) = problem.prior_gradient(x)?;
    let (accepted, parts, tau, shrinks) =
        problem.backtrack(x, objective_before, &grad, tau_in, eta, gamma)?;
    Ok(BacktrackResult {
        accepted,
        tau,
        shrinks,
        objective_before,
        objective_after: parts.0,
    })
}

#[derive(Debug)]
pub struct SolverRun {
    pub restored: Image,
    pub trace: SolverTrace,
}

/// A configured solver; optional extras attach a ground truth (PSNR column)
/// and expansiveness tracking.
pub struct Solver<'a> {
    degradation: &'a Degradation,
    prior: &'a dyn GradientPrior,
    config: &'a SolverConfig,
    ground_truth: Option<&'a Image>,
    track_expansiveness: bool,
}

impl<'a> Solver<'a> {
    pub fn new(
        degradation: &'a Degradation,
        prior: &'a dyn GradientPrior,
        config: &'a SolverConfig,
    ) -> Self {
        Solver {
            degradation,
            prior,
            config,
            ground_truth: None,
            track_expansiveness: false,
        }
    }

    pub fn with_ground_truth(mut self, truth: &'a Image) -> Self {
        self.ground_truth = Some(truth);
        self
    }

    pub fn with_expansiveness_tracking(mut self, on: bool) -> Self {
        self.track_expansiveness = on;
        self
    }

    /// Runs Algorithm: x₀ = Prox_{τ₀f}(z₀), then backtracked PGD steps until
    /// the relative decrease Δ = [F(x_k)−F(x_{k+1})]/F(x₀) drops below ε or
    /// the cap K is hit; optionally one extra gradient step at the end.
    pub fn run(&self, y: &Image, z0: &Image) -> Result<SolverRun> {
        let cfg = self.config;
        cfg.validate()?;
        let problem = Problem {
            degradation: self.degradation,
            y,
            prior: self.prior,
            lambda: cfg.lambda,
            box_projection: cfg.box_projection,
        };

        let mut x = self.degradation.prox(z0, y, cfg.tau0)?;
        if !x.is_finite() {
            return Err(Error::NonFinite("initialization prox"));
        }
        let (mut objective_x, mut fidelity_x, mut regularizer_x) = problem.objective_parts(&x)?;
        if !objective_x.is_finite() {
            return Err(Error::NonFinite("objective at x0"));
        }
        let initial_objective = objective_x;
        // Δ normalizer; |F(x₀)| can underflow for analytic priors, in which
        // case the decrease test degrades gracefully to an absolute one.
        let delta_norm = objective_x.abs().max(f64::MIN_POSITIVE);
        let x0_norm_sq = x.norm_sq();

        let mut tau = cfg.tau0;
        let mut records = Vec::new();
        let mut min_residual = f64::INFINITY;
        let mut partial_len = 0.0;
        let mut box_activated = false;
        let mut stop = StopReason::IterationCap;
        let mut last_delta = None;
        let mut denoised_prev: Option<Image> = None;

        let mut k = 0;
        while k < cfg.max_iters {
            let (grad, box_active) = problem.prior_gradient(&x)?;
            box_activated |= box_active;

            let (next, parts_next, tau_accepted, shrinks) = if cfg.backtracking {
                problem.backtrack(&x, objective_x, &grad, tau, cfg.eta, cfg.gamma)?
            } else {
                let candidate = problem.step(&x, &grad, tau)?;
                let parts = problem.objective_parts(&candidate)?;
                (candidate, parts, tau, 0)
            };
            tau = tau_accepted;

            let residual_sq = next.sub(&x).norm_sq();
            min_residual = min_residual.min(residual_sq);
            partial_len += residual_sq.sqrt();

            let expansiveness = if self.track_expansiveness && residual_sq > 0.0 {
                let d_prev = match denoised_prev.take() {
                    Some(d) => d,
                    None => self.prior.denoise(&x)?,
                };
                let d_next = self.prior.denoise(&next)?;
                let ratio = d_next.sub(&d_prev).norm() / residual_sq.sqrt();
                denoised_prev = Some(d_next);
                Some(ratio)
            } else {
                denoised_prev = None;
                None
            };

            records.push(IterationRecord {
                k,
                objective: objective_x,
                fidelity: fidelity_x,
                regularizer: regularizer_x,
                tau,
                residual_sq,
                gamma_k: min_residual / x0_norm_sq.max(f64::MIN_POSITIVE),
                backtracks: shrinks,
                psnr: self
                    .ground_truth
                    .map(|truth| psnr(truth, &x))
                    .transpose()?,
                expansiveness,
            });

            let delta = (objective_x - parts_next.0) / delta_norm;
            last_delta = Some(delta);
            x = next;
            (objective_x, fidelity_x, regularizer_x) = parts_next;
            k += 1;

            // The relative-decrease rule presumes accepted (descent) steps;
            // fixed-stepsize runs terminate on the iteration cap alone.
            if cfg.backtracking && delta < cfg.eps {
                stop = StopReason::Converged;
                break;
            }
        }

        let restored = if cfg.final_gradient_step {
            let (grad, box_active) = problem.prior_gradient(&x)?;
            box_activated |= box_active;
            x.add_scaled(&grad, -cfg.lambda * tau)
        } else {
            x
        };
        if !restored.is_finite() {
            return Err(Error::NonFinite("restored iterate"));
        }

        Ok(SolverRun {
            restored,
            trace: SolverTrace {
                records,
                x0_norm_sq,
                initial_objective,
                final_objective: objective_x,
                stop,
                last_delta,
                box_term_activated: box_activated,
                residual_partial_len: partial_len,
            },
        })
    }
}

/// Free-function form of [`Solver::run`].
pub fn run(
    y: &Image,
    degradation: &Degradation,
    prior: &dyn GradientPrior,
    config: &SolverConfig,
    z0: &Image,
) -> Result<SolverRun> {
    Solver::new(degradation, prior, config).run(y, z0)
}

/// Fixed points are stationary points: this measures ‖∇f(x) + λ∇g_σ(x)‖
/// for the smooth fidelities. For the inpainting indicator, ∂f is a normal
/// cone (vectors supported on observed pixels), so the residual is the
/// unobserved part ‖(I−A)(λ∇g_σ(x))‖ instead.
pub fn stationarity_residual(
    x: &Image,
    degradation: &Degradation,
    y: &Image,
    prior: &dyn GradientPrior,
    lambda: f64,
) -> Result<f64> {
    let prior_grad = prior.grad(x)?.scale(lambda);
    match degradation {
        Degradation::Inpaint { .. } => {
            let masked = degradation.forward(&prior_grad)?;
            Ok(prior_grad.sub(&masked).norm())
        }
        _ => {
            let fidelity_grad = degradation.fidelity_gradient(x, y)?;
            Ok(fidelity_grad.add(&prior_grad).norm())
        }
    }
}

#[derive(Debug, Clone)]
pub struct RateBoundViolation {
    pub k: usize,
    pub gamma_raw: f64,
    pub bound: f64,
}

/// Result of checking γ_k ≤ (1/k)·[F(x₀)−F_final]/(1/(2τ) − λL/2) at every
/// recorded iteration, with the final trace objective standing in for the
/// unknowable limit.
#[derive(Debug, Clone)]
pub struct RateBoundReport {
    pub checked: usize,
    pub denominator: f64,
    pub numerator: f64,
    pub first_violation: Option<RateBoundViolation>,
    pub violations: usize,
}

impl RateBoundReport {
    pub fn passed(&self) -> bool {
        self.violations == 0
    }
}

/// O(1/k) residual-rate check for a fixed-stepsize run. Requires
/// λτL < 1 (the bound is inapplicable otherwise). γ_k is recomputed from
/// the raw residual column.
pub fn rate_bound_check(
    trace: &SolverTrace,
    tau: f64,
    lambda: f64,
    lipschitz: f64,
) -> Result<RateBoundReport> {
    if trace.records.len() < 2 {
        return Err(Error::InvalidParameter(
            "rate bound needs at least two recorded iterations".into(),
        ));
    }
    if !(lambda * tau * lipschitz < 1.0) {
        return Err(Error::InvalidParameter(format!(
            "rate bound requires lambda*tau < 1/L, got lambda*tau*L = {}",
            lambda * tau * lipschitz
        )));
    }
    let denominator = 1.0 / (2.0 * tau) - lambda * lipschitz / 2.0;
    let numerator = trace.initial_objective - trace.final_objective;
    let mut min_res = f64::INFINITY;
    let mut first_violation = None;
    let mut violations = 0;
    for (idx, r) in trace.records.iter().enumerate() {
        min_res = min_res.min(r.residual_sq);
        // Row idx covers steps 0..=idx, i.e. idx+1 residuals.
        let bound = numerator / denominator / (idx + 1) as f64;
        if min_res > bound * (1.0 + 1e-9) + 1e-300 {
            violations += 1;
            if first_violation.is_none() {
                first_violation = Some(RateBoundViolation {
                    k: r.k,
                    gamma_raw: min_res,
                    bound,
                });
            }
        }
    }
    Ok(RateBoundReport {
        checked: trace.records.len(),
        denominator,
        numerator,
        first_violation,
        violations,
    })
}
