//! Run specification: task, file inputs, solver parameters, and their
//! per-task defaults; plus asset loading and prior construction.

use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::image::Image;
use crate::linop::BlurKernel;
use crate::prior::{GaussianMixture, GmmPrior, GradientPrior, GsNetwork, NetworkPrior, QuadraticPrior};
use crate::solver::SolverConfig;

pub const INPAINT_WARMUP_ITERS: usize = 10;
pub const INPAINT_WARMUP_SIGMA: f64 = 50.0 / 255.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Task {
    Deblur,
    Sr,
    Inpaint,
    DenoiseOnly,
}

impl Task {
    pub fn parse(name: &str) -> Result<Task> {
        match name {
            "deblur" => Ok(Task::Deblur),
            "sr" => Ok(Task::Sr),
            "inpaint" => Ok(Task::Inpaint),
            "denoise-only" => Ok(Task::DenoiseOnly),
            other => Err(Error::InvalidParameter(format!(
                "unknown task {other:?} (expected deblur, sr, inpaint or denoise-only)"
            ))),
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            Task::Deblur => "deblur",
            Task::Sr => "sr",
            Task::Inpaint => "inpaint",
            Task::DenoiseOnly => "denoise-only",
        }
    }
}

/// How the initialization z₀ is built for super-resolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SrInit {
    /// Zero-fill adjoint upsampling (rescaled) followed by one denoiser
    /// pass.
    Adjoint,
    /// Catmull-Rom bicubic upsampling; approximate (no shift correction).
    Bicubic,
}

/// A fully resolved restoration run.
#[derive(Debug, Clone)]
pub struct RunSpec {
    pub task: Task,
    pub input: PathBuf,
    pub kernel: Option<PathBuf>,
    pub mask: Option<PathBuf>,
    pub weights: Option<PathBuf>,
    pub gmm: Option<PathBuf>,
    /// Quadratic-prior weight used when neither weights nor gmm are given.
    pub alpha: f64,
    pub nu: f64,
    pub scale: usize,
    pub lambda_nu: f64,
    pub sigma_d: f64,
    pub eta: f64,
    pub gamma: f64,
    pub eps: f64,
    pub max_iter: usize,
    pub seed: u64,
    pub out_dir: PathBuf,
    /// The input file is the observation itself, not a ground truth to
    /// degrade.
    pub observed: bool,
    pub box_projection: bool,
    pub final_gradient_step: bool,
    pub sr_init: SrInit,
}

impl RunSpec {
    pub fn validate(&self) -> Result<()> {
        match self.task {
            Task::Deblur | Task::Sr => {
                if self.kernel.is_none() {
                    return Err(Error::InvalidParameter(format!(
                        "task {} requires --kernel",
                        self.task.as_str()
                    )));
                }
            }
            Task::Inpaint => {
                if self.mask.is_none() {
                    return Err(Error::InvalidParameter("task inpaint requires --mask".into()));
                }
            }
            Task::DenoiseOnly => {}
        }
        if self.task == Task::Sr && self.scale == 0 {
            return Err(Error::InvalidParameter("SR scale must be >= 1".into()));
        }
        if !(self.nu >= 0.0) {
            return Err(Error::InvalidParameter(format!(
                "noise level must be nonnegative, got {}",
                self.nu
            )));
        }
        self.solver_config().validate()
    }

    /// Solver parameters implied by this spec (stopping, stepsizes,
    /// toggles). The inpainting protocol fixes λτ = 1 without backtracking
    /// and no final gradient step.
    pub fn solver_config(&self) -> SolverConfig {
        let inpaint = self.task == Task::Inpaint;
        let lambda = if inpaint { 1.0 } else { self.lambda_nu };
        SolverConfig {
            lambda,
            sigma: self.sigma_d,
            tau0: 1.0 / lambda,
            eta: self.eta,
            gamma: self.gamma,
            eps: self.eps,
            max_iters: self.max_iter,
            box_projection: self.box_projection,
            final_gradient_step: self.final_gradient_step && !inpaint,
            backtracking: !inpaint,
        }
    }
}

/// Per-task parameter defaults (applied before config-file and flag
/// overrides): deblur λ_ν = 0.1 (0.075 suits static blur), σ = 1.8ν,
/// ε = 1e-5, K = 400; SR λ_ν = 0.065, σ = 2ν, ε = 1e-6, K = 400;
/// inpainting σ = 10/255 with a 50/255 warmup, λτ = 1, K = 100.
pub struct TaskDefaults {
    pub lambda_nu: f64,
    pub sigma_over_nu: f64,
    pub sigma_d: Option<f64>,
    pub eps: f64,
    pub max_iter: usize,
    pub final_gradient_step: bool,
}

impl TaskDefaults {
    pub fn for_task(task: Task) -> TaskDefaults {
        match task {
            Task::Deblur => TaskDefaults {
                lambda_nu: 0.1,
                sigma_over_nu: 1.8,
                sigma_d: None,
                eps: 1e-5,
                max_iter: 400,
                final_gradient_step: true,
            },
            Task::Sr => TaskDefaults {
                lambda_nu: 0.065,
                sigma_over_nu: 2.0,
                sigma_d: None,
                eps: 1e-6,
                max_iter: 400,
                final_gradient_step: true,
            },
            Task::Inpaint => TaskDefaults {
                lambda_nu: 1.0,
                sigma_over_nu: 0.0,
                sigma_d: Some(10.0 / 255.0),
                eps: 0.0,
                max_iter: 100,
                final_gradient_step: false,
            },
            Task::DenoiseOnly => TaskDefaults {
                lambda_nu: 1.0,
                sigma_over_nu: 1.0,
                sigma_d: None,
                eps: 1e-5,
                max_iter: 1,
                final_gradient_step: false,
            },
        }
    }
}

/// The prior selected by a spec, loaded once and rebindable to any σ (the
/// network is σ-conditioned; the mixture is re-smoothed; the quadratic
/// prior ignores σ).
#[derive(Debug, Clone)]
pub enum PriorKind {
    Network(GsNetwork),
    Gmm(GaussianMixture),
    Quadratic { alpha: f64 },
}

impl PriorKind {
    pub fn load(spec: &RunSpec) -> Result<PriorKind> {
        if let Some(path) = &spec.weights {
            return Ok(PriorKind::Network(GsNetwork::load(path)?));
        }
        if let Some(path) = &spec.gmm {
            return Ok(PriorKind::Gmm(GaussianMixture::load(path)?));
        }
        Ok(PriorKind::Quadratic { alpha: spec.alpha })
    }

    /// Instantiates the prior at a noise level, on a given working grid.
    pub fn bind(&self, sigma: f64, grid: &Image) -> Result<Box<dyn GradientPrior>> {
        match self {
            PriorKind::Network(net) => Ok(Box::new(NetworkPrior::new(net.clone(), sigma)?)),
            PriorKind::Gmm(mixture) => {
                if mixture.dim() != grid.len() {
                    return Err(Error::dims("PriorKind::bind", mixture.dim(), grid.len()));
                }
                Ok(Box::new(GmmPrior::new(mixture.clone(), sigma)?))
            }
            PriorKind::Quadratic { alpha } => Ok(Box::new(QuadraticPrior::new(
                *alpha,
                Image::constant(grid.width(), grid.height(), grid.channels(), 0.5)?,
            )?)),
        }
    }

    pub fn describe(&self) -> String {
        match self {
            PriorKind::Network(net) => format!("network({} parameters)", net.parameter_count()),
            PriorKind::Gmm(m) => format!("gmm({} components, dim {})", m.components().len(), m.dim()),
            PriorKind::Quadratic { alpha } => format!("quadratic(alpha = {alpha})"),
        }
    }
}

/// Everything a restoration needs, loaded from disk exactly once.
pub struct Assets {
    pub input: Image,
    pub kernel: Option<BlurKernel>,
    pub mask: Option<Image>,
    pub prior: PriorKind,
}

impl Assets {
    pub fn load(spec: &RunSpec) -> Result<Assets> {
        let input = crate::io::load_image(&spec.input)?;
        let kernel = spec.kernel.as_deref().map(BlurKernel::load).transpose()?;
        let mask = spec.mask.as_deref().map(crate::io::load_image).transpose()?;
        let prior = PriorKind::load(spec)?;
        Ok(Assets {
            input,
            kernel,
            mask,
            prior,
        })
    }
}

/// Catmull-Rom bicubic upsampling by an integer factor, circular boundary.
pub fn bicubic_upsample(y: &Image, scale: usize) -> Image {
    if scale == 1 {
        return y.clone();
    }
    let (lw, lh) = (y.width() as isize, y.height() as isize);
    let (hw, hh) = (y.width() * scale, y.height() * scale);
    let weight = |t: f64| -> f64 {
        let a = t.abs();
        if a <= 1.0 {
            1.5 * a.powi(3) - 2.5 * a * a + 1.0
        } else if a < 2.0 {
            -0.5 * a.powi(3) + 2.5 * a * a - 4.0 * a + 2.0
        } else {
            0.0
        }
    };
    let mut data = Vec::with_capacity(hw * hh * y.channels());
    for c in 0..y.channels() {
        let plane = y.plane(c);
        for oy in 0..hh {
            let sy = (oy as f64 + 0.5) / scale as f64 - 0.5;
            let y0 = sy.floor() as isize;
            for ox in 0..hw {
                let sx = (ox as f64 + 0.5) / scale as f64 - 0.5;
                let x0 = sx.floor() as isize;
                let mut acc = 0.0;
                for dy in -1..=2 {
                    let wy = weight(sy - (y0 + dy) as f64);
                    if wy == 0.0 {
                        continue;
                    }
                    let py = (y0 + dy).rem_euclid(lh);
                    for dx in -1..=2 {
                        let wx = weight(sx - (x0 + dx) as f64);
                        if wx == 0.0 {
                            continue;
                        }
                        let px = (x0 + dx).rem_euclid(lw);
                        acc += wy * wx * plane[(py * lw + px) as usize];
                    }
                }
                data.push(acc);
            }
        }
    }
    Image::from_vec(hw, hh, y.channels(), data).expect("bicubic output is finite")
}

/// Reads the flat `key = value` config format; `#` starts a comment.
pub fn read_config_file(path: &Path) -> Result<Vec<(String, String)>> {
    let text = std::fs::read_to_string(path)?;
    let mut pairs = Vec::new();
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (key, value) = line.split_once('=').ok_or_else(|| {
            Error::malformed(path, format!("line {}: expected key = value", lineno + 1))
        })?;
        pairs.push((key.trim().to_string(), value.trim().to_string()));
    }
    Ok(pairs)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn task_names_round_trip() {
        for name in ["deblur", "sr", "inpaint", "denoise-only"] {
            assert_eq!(Task::parse(name).unwrap().as_str(), name);
        }
        assert!(Task::parse("zoom").is_err());
    }

    #[test]
    fn bicubic_preserves_constants() {
        let y = Image::constant(4, 4, 1, 0.37).unwrap();
        let up = bicubic_upsample(&y, 2);
        assert_eq!((up.width(), up.height()), (8, 8));
        for &v in up.data() {
            assert!((v - 0.37).abs() < 1e-12);
        }
    }

    #[test]
    fn config_file_parses_and_reports_bad_lines() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.conf");
        std::fs::write(&path, "# experiment\nlambda-nu = 0.08\nseed= 3\n\nmax-iter =50\n").unwrap();
        let pairs = read_config_file(&path).unwrap();
        assert_eq!(
            pairs,
            vec![
                ("lambda-nu".to_string(), "0.08".to_string()),
                ("seed".to_string(), "3".to_string()),
                ("max-iter".to_string(), "50".to_string()),
            ]
        );
        std::fs::write(&path, "lambda-nu 0.08\n").unwrap();
        assert!(read_config_file(&path).is_err());
    }
}
