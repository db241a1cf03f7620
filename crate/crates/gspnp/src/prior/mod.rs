//! Gradient-step priors: an explicit regularization energy g_σ, its exact
//! gradient, and the induced denoiser D_σ = Id − ∇g_σ, plus
//! Lipschitz/expansiveness diagnostics.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::image::Image;

pub mod gmm;
pub mod network;
pub mod quadratic;

pub use gmm::{GaussianMixture, GmmComponent, GmmPrior};
pub use network::{ConvLayer, GsNetwork, NetworkPrior};
pub use quadratic::QuadraticPrior;

/// A prior defined through a smooth energy g_σ. The denoiser is exactly one
/// gradient step on the energy, `D_σ(x) = x − ∇g_σ(x)`; the default method
/// makes that identity hold to the last bit for every implementation.
///
/// Implementations are immutable after construction; evaluation is pure.
pub trait GradientPrior {
    /// Noise level the prior is conditioned on.
    fn sigma(&self) -> f64;

    /// Regularization energy g_σ(x).
    fn energy(&self, x: &Image) -> Result<f64>;

    /// Exact gradient ∇g_σ(x).
    fn grad(&self, x: &Image) -> Result<Image>;

    /// Induced denoiser D_σ(x) = x − ∇g_σ(x).
    fn denoise(&self, x: &Image) -> Result<Image> {
        Ok(x.sub(&self.grad(x)?))
    }
}

impl<P: GradientPrior + ?Sized> GradientPrior for &P {
    fn sigma(&self) -> f64 {
        (**self).sigma()
    }

    fn energy(&self, x: &Image) -> Result<f64> {
        (**self).energy(x)
    }

    fn grad(&self, x: &Image) -> Result<Image> {
        (**self).grad(x)
    }

    fn denoise(&self, x: &Image) -> Result<Image> {
        (**self).denoise(x)
    }
}

/// Estimates the spectral norm of the Hessian ∇²g_σ at x with power
/// iterations.
///
/// Each Hessian-vector product is a centered difference of the gradient,
/// `[∇g(x+εu) − ∇g(x−εu)]/(2ε)` with `ε = 1e-4·‖x‖/‖u‖`. Returns the
/// (nonnegative) Rayleigh-quotient estimate after the last iteration.
pub fn estimate_hessian_spectral_norm(
    prior: &dyn GradientPrior,
    x: &Image,
    iterations: usize,
) -> Result<f64> {
    if iterations == 0 {
        return Err(Error::InvalidParameter(
            "power iteration needs at least one iteration".into(),
        ));
    }
    let x_norm = x.norm().max(1e-8);
    let hvp = |u: &Image| -> Result<Image> {
        let eps = 1e-4 * x_norm / u.norm();
        let plus = prior.grad(&x.add_scaled(u, eps))?;
        let minus = prior.grad(&x.add_scaled(u, -eps))?;
        let out = plus.sub(&minus).scale(1.0 / (2.0 * eps));
        if !out.is_finite() {
            return Err(Error::NonFinite("hessian-vector product"));
        }
        Ok(out)
    };

    let mut rng = ChaCha8Rng::seed_from_u64(0x9e3779b97f4a7c15);
    let mut u = x.map(|_| rng.random_range(-1.0..1.0));
    let norm = u.norm();
    if norm == 0.0 {
        return Ok(0.0);
    }
    u = u.scale(1.0 / norm);

    let mut rayleigh = 0.0;
    for _ in 0..iterations {
        let hu = hvp(&u)?;
        rayleigh = u.dot(&hu);
        let norm = hu.norm();
        if norm == 0.0 {
            return Ok(0.0);
        }
        u = hu.scale(1.0 / norm);
    }
    Ok(rayleigh.abs())
}

/// Local expansiveness of the denoiser between two points:
/// `‖D(x₁)−D(x₂)‖ / ‖x₁−x₂‖`. Trained denoisers occasionally exceed 1;
/// this is logged along solver runs, never asserted.
pub fn expansiveness_ratio(prior: &dyn GradientPrior, x1: &Image, x2: &Image) -> Result<f64> {
    if !x1.same_shape(x2) {
        return Err(Error::dims(
            "expansiveness_ratio",
            x1.shape_string(),
            x2.shape_string(),
        ));
    }
    let denom = x1.sub(x2).norm();
    if denom == 0.0 {
        return Err(Error::InvalidParameter(
            "expansiveness ratio is undefined for identical inputs".into(),
        ));
    }
    let d1 = prior.denoise(x1)?;
    let d2 = prior.denoise(x2)?;
    Ok(d1.sub(&d2).norm() / denom)
}

#[cfg(test)]
pub(crate) mod test_support {
    use super::*;

    /// Centered finite differences of the energy, the oracle every prior's
    /// gradient is checked against.
    pub fn finite_difference_grad(
        prior: &dyn GradientPrior,
        x: &Image,
        step: f64,
    ) -> Result<Image> {
        let mut out = Vec::with_capacity(x.len());
        for i in 0..x.len() {
            let mut plus = x.data().to_vec();
            plus[i] += step;
            let mut minus = x.data().to_vec();
            minus[i] -= step;
            let gp = prior.energy(&x.with_data(plus))?;
            let gm = prior.energy(&x.with_data(minus))?;
            out.push((gp - gm) / (2.0 * step));
        }
        Ok(x.with_data(out))
    }

    pub fn assert_grad_matches_fd(prior: &dyn GradientPrior, x: &Image, rel_tol: f64) {
        let grad = prior.grad(x).unwrap();
        let fd = finite_difference_grad(prior, x, 1e-5).unwrap();
        let err = grad.sub(&fd).norm() / fd.norm().max(1e-30);
        assert!(err < rel_tol, "gradient vs finite differences: {err}");
    }
}

#[cfg(test)]
mod tests {
    use super::test_support::assert_grad_matches_fd;
    use super::*;
    use crate::prior::quadratic::QuadraticPrior;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_image(w: usize, h: usize, rng: &mut ChaCha8Rng) -> Image {
        Image::from_vec(w, h, 1, (0..w * h).map(|_| rng.random_range(-1.0..1.0)).collect())
            .unwrap()
    }

    #[test]
    fn denoise_is_exactly_identity_minus_grad() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let m = random_image(6, 6, &mut rng);
        let prior = QuadraticPrior::new(0.37, m).unwrap();
        let x = random_image(6, 6, &mut rng);
        let lhs = prior.denoise(&x).unwrap();
        let rhs = x.sub(&prior.grad(&x).unwrap());
        assert_eq!(lhs.data(), rhs.data());
    }

    #[test]
    fn quadratic_grad_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let m = random_image(8, 8, &mut rng);
        let prior = QuadraticPrior::new(0.9, m).unwrap();
        for _ in 0..5 {
            let x = random_image(8, 8, &mut rng);
            assert_grad_matches_fd(&prior, &x, 1e-5);
        }
    }

    #[test]
    fn spectral_norm_of_quadratic_prior_is_alpha() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let m = random_image(6, 6, &mut rng);
        let prior = QuadraticPrior::new(0.7, m).unwrap();
        let x = random_image(6, 6, &mut rng);
        let est = estimate_hessian_spectral_norm(&prior, &x, 20).unwrap();
        assert!((est - 0.7).abs() < 1e-6, "estimate {est}");
    }

    #[test]
    fn spectral_norm_requires_an_iteration() {
        let m = Image::zeros(4, 4, 1).unwrap();
        let prior = QuadraticPrior::new(0.5, m.clone()).unwrap();
        assert!(estimate_hessian_spectral_norm(&prior, &m, 0).is_err());
    }

    #[test]
    fn expansiveness_of_affine_denoiser() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let m = random_image(6, 6, &mut rng);
        // D(x) = x − α(x−m) is affine with factor (1−α).
        for alpha in [0.25, 1.0, 1.75] {
            let prior = QuadraticPrior::new(alpha, m.clone()).unwrap();
            let x1 = random_image(6, 6, &mut rng);
            let x2 = random_image(6, 6, &mut rng);
            let ratio = expansiveness_ratio(&prior, &x1, &x2).unwrap();
            assert!((ratio - (1.0 - alpha).abs()).abs() < 1e-12);
        }
    }

    #[test]
    fn expansiveness_identity_denoiser_is_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let m = random_image(5, 5, &mut rng);
        let prior = QuadraticPrior::new(0.0, m).unwrap();
        let x1 = random_image(5, 5, &mut rng);
        let x2 = random_image(5, 5, &mut rng);
        assert!((expansiveness_ratio(&prior, &x1, &x2).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn expansiveness_rejects_identical_inputs() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let m = random_image(5, 5, &mut rng);
        let prior = QuadraticPrior::new(0.5, m).unwrap();
        let x = random_image(5, 5, &mut rng);
        assert!(expansiveness_ratio(&prior, &x, &x).is_err());
    }
}
