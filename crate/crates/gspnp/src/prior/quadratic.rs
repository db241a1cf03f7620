//! Quadratic prior: the end-to-end linear-algebra oracle for the solver.
//!
//! g(x) = (α/2)‖x−m‖² has gradient α(x−m), exactly α-Lipschitz, so every
//! convergence statement about the solver can be checked against dense
//! closed forms.

use crate::error::{Error, Result};
use crate::image::Image;
use crate::prior::GradientPrior;

#[derive(Debug, Clone)]
pub struct QuadraticPrior {
    alpha: f64,
    center: Image,
}

impl QuadraticPrior {
    pub fn new(alpha: f64, center: Image) -> Result<Self> {
        if !(alpha >= 0.0) || !alpha.is_finite() {
            return Err(Error::InvalidParameter(format!(
                "quadratic prior weight must be finite and nonnegative, got {alpha}"
            )));
        }
        Ok(QuadraticPrior { alpha, center })
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn center(&self) -> &Image {
        &self.center
    }

    fn check(&self, x: &Image) -> Result<()> {
        if !x.same_shape(&self.center) {
            return Err(Error::dims(
                "QuadraticPrior",
                self.center.shape_string(),
                x.shape_string(),
            ));
        }
        Ok(())
    }
}

impl GradientPrior for QuadraticPrior {
    fn sigma(&self) -> f64 {
        0.0
    }

    fn energy(&self, x: &Image) -> Result<f64> {
        self.check(x)?;
        Ok(0.5 * self.alpha * x.sub(&self.center).norm_sq())
    }

    fn grad(&self, x: &Image) -> Result<Image> {
        self.check(x)?;
        Ok(x.sub(&self.center).scale(self.alpha))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_weight_denoiser_is_identity() {
        let m = Image::constant(4, 4, 1, 0.3).unwrap();
        let prior = QuadraticPrior::new(0.0, m).unwrap();
        let x = Image::constant(4, 4, 1, 0.9).unwrap();
        assert_eq!(prior.denoise(&x).unwrap().data(), x.data());
    }

    #[test]
    fn unit_weight_zero_center_denoises_to_zero() {
        let m = Image::zeros(4, 4, 1).unwrap();
        let prior = QuadraticPrior::new(1.0, m).unwrap();
        let x = Image::constant(4, 4, 1, 0.7).unwrap();
        let d = prior.denoise(&x).unwrap();
        assert!(d.data().iter().all(|&v| v.abs() < 1e-15));
    }

    #[test]
    fn rejects_negative_weight_and_shape_mismatch() {
        let m = Image::zeros(4, 4, 1).unwrap();
        assert!(QuadraticPrior::new(-1.0, m.clone()).is_err());
        let prior = QuadraticPrior::new(1.0, m).unwrap();
        let x = Image::zeros(5, 4, 1).unwrap();
        assert!(prior.energy(&x).is_err());
    }
}
