//! Gradient-step plug-and-play image restoration.
//!
//! The denoiser plugged into the iterations is an exact gradient step on an
//! explicit regularization energy, `D_σ = Id − ∇g_σ`, so the whole scheme
//! is a proximal gradient descent on `F = ½‖Ax−y‖² + λ·g_σ` with provable
//! descent: the objective is monotone, the residual vanishes at rate
//! O(1/k), and backtracking keeps the stepsize valid without knowing the
//! Lipschitz constant of ∇g_σ.
//!
//! The crate provides:
//!
//! * [`image`]: f64 planar images, PSNR, seeded Gaussian noise, raw-float
//!   and PGM/PPM I/O ([`io`]).
//! * [`linop`]: circular blur, decimated blur and mask degradations with
//!   closed-form FFT proximal maps.
//! * [`prior`]: the [`prior::GradientPrior`] interface and three
//!   realizations — an analytic Gaussian-mixture oracle (exact MMSE
//!   denoiser), a quadratic prior (linear-algebra oracle), and a small
//!   trainable convolutional prior with a hand-written transpose-Jacobian
//!   pass.
//! * [`training`]: denoising-score-matching training of the network prior
//!   with exact parameter gradients and Adam.
//! * [`solver`]: the plug-and-play proximal gradient descent with
//!   backtracking, trace diagnostics, stationarity and rate-bound checks.
//! * [`cli`]: the `gspnp` command-line front end (restore / train / sweep /
//!   diagnose / init-robustness).
//!
//! The `examples/` directory has one runnable program per capability; start
//! with `cargo run --release --example deblur`.

pub mod cli;
pub mod error;
mod fft;
pub mod image;
pub mod io;
pub mod linop;
pub mod prior;
pub mod solver;
pub mod training;

pub use error::{Error, Result};
pub use image::Image;
