//! Isotropic Gaussian-mixture prior: the project's analytic ground truth.
//!
//! Smoothing a mixture component N(μ, vI) with noise N(0, σ²I) is again
//! isotropic Gaussian with variance v + σ², so the smoothed log-density, its
//! gradient, and the exact MMSE denoiser (the posterior mean) are all
//! closed-form. The induced energy is g_σ = −σ²·log p_σ (up to a constant),
//! whose gradient step is the MMSE denoiser.

use std::path::Path;

use rand::Rng;

use crate::error::{Error, Result};
use crate::image::Image;
use crate::prior::GradientPrior;

#[derive(Debug, Clone)]
pub struct GmmComponent {
    pub weight: f64,
    pub variance: f64,
    pub mean: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct GaussianMixture {
    dim: usize,
    components: Vec<GmmComponent>,
}

impl GaussianMixture {
    /// Weights must be positive and sum to 1 (within 1e-9); variances
    /// strictly positive; all means of equal dimension.
    pub fn new(components: Vec<GmmComponent>) -> Result<Self> {
        let first = components
            .first()
            .ok_or_else(|| Error::InvalidParameter("mixture needs at least one component".into()))?;
        let dim = first.mean.len();
        if dim == 0 {
            return Err(Error::InvalidParameter("mixture dimension must be positive".into()));
        }
        let mut weight_sum = 0.0;
        for c in &components {
            if c.mean.len() != dim {
                return Err(Error::dims("GaussianMixture::new", dim, c.mean.len()));
            }
            if !(c.weight > 0.0) || !c.weight.is_finite() {
                return Err(Error::InvalidParameter(format!(
                    "component weights must be positive, got {}",
                    c.weight
                )));
            }
            if !(c.variance > 0.0) || !c.variance.is_finite() {
                return Err(Error::InvalidParameter(format!(
                    "component variances must be strictly positive, got {}",
                    c.variance
                )));
            }
            if !c.mean.iter().all(|v| v.is_finite()) {
                return Err(Error::NonFinite("GaussianMixture::new"));
            }
            weight_sum += c.weight;
        }
        if (weight_sum - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidParameter(format!(
                "component weights must sum to 1, got {weight_sum}"
            )));
        }
        Ok(GaussianMixture { dim, components })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn components(&self) -> &[GmmComponent] {
        &self.components
    }

    /// Mixture mean Σ wᵢμᵢ.
    pub fn mean(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.dim];
        for c in &self.components {
            for (o, &m) in out.iter_mut().zip(&c.mean) {
                *o += c.weight * m;
            }
        }
        out
    }

    /// Plain-text format: first line `n_components dim`, then one line per
    /// component `weight variance mean...`.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)?;
        let mut tokens = text.split_whitespace();
        let mut next = |name: &str| -> Result<f64> {
            tokens
                .next()
                .ok_or_else(|| Error::malformed(path, format!("missing {name}")))?
                .parse()
                .map_err(|_| Error::malformed(path, format!("bad {name}")))
        };
        let n = next("n_components")? as usize;
        let dim = next("dim")? as usize;
        let mut components = Vec::with_capacity(n);
        for i in 0..n {
            let weight = next(&format!("weight[{i}]"))?;
            let variance = next(&format!("variance[{i}]"))?;
            let mut mean = Vec::with_capacity(dim);
            for j in 0..dim {
                mean.push(next(&format!("mean[{i}][{j}]"))?);
            }
            components.push(GmmComponent {
                weight,
                variance,
                mean,
            });
        }
        GaussianMixture::new(components)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut out = format!("{} {}\n", self.components.len(), self.dim);
        for c in &self.components {
            out.push_str(&format!("{:.17e} {:.17e}", c.weight, c.variance));
            for m in &c.mean {
                out.push_str(&format!(" {m:.17e}"));
            }
            out.push('\n');
        }
        std::fs::write(path, out)?;
        Ok(())
    }

    /// Per-component log terms `ln wᵢ + ln N(x; μᵢ, (vᵢ+σ²)I)`.
    fn log_terms(&self, sigma: f64, x: &[f64]) -> Vec<f64> {
        let n = self.dim as f64;
        self.components
            .iter()
            .map(|c| {
                let var = c.variance + sigma * sigma;
                let dist_sq: f64 = x
                    .iter()
                    .zip(&c.mean)
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum();
                c.weight.ln() - 0.5 * dist_sq / var
                    - 0.5 * n * (2.0 * std::f64::consts::PI * var).ln()
            })
            .collect()
    }

    /// log p_σ(x), the log-density of the mixture smoothed by N(0, σ²I),
    /// evaluated with log-sum-exp stabilization.
    pub fn log_density_smoothed(&self, sigma: f64, x: &[f64]) -> Result<f64> {
        self.check_dim(x.len())?;
        Ok(log_sum_exp(&self.log_terms(sigma, x)))
    }

    /// Energy g_σ(x) = −σ²·log p_σ(x).
    pub fn smoothed_energy(&self, sigma: f64, x: &[f64]) -> Result<f64> {
        Ok(-sigma * sigma * self.log_density_smoothed(sigma, x)?)
    }

    /// Exact gradient of [`GaussianMixture::smoothed_energy`]: the
    /// posterior-responsibility combination of per-component Mahalanobis
    /// terms, σ²·Σᵢ rᵢ(x)·(x−μᵢ)/(vᵢ+σ²).
    pub fn smoothed_energy_grad(&self, sigma: f64, x: &[f64]) -> Result<Vec<f64>> {
        self.check_dim(x.len())?;
        let responsibilities = softmax(&self.log_terms(sigma, x));
        let mut out = vec![0.0; self.dim];
        for (r, c) in responsibilities.iter().zip(&self.components) {
            let scale = sigma * sigma * r / (c.variance + sigma * sigma);
            for ((o, &xv), &mv) in out.iter_mut().zip(x).zip(&c.mean) {
                *o += scale * (xv - mv);
            }
        }
        Ok(out)
    }

    fn check_dim(&self, len: usize) -> Result<()> {
        if len != self.dim {
            return Err(Error::dims("GaussianMixture", self.dim, len));
        }
        Ok(())
    }

    /// Draws one sample from the (unsmoothed) mixture.
    pub fn sample<R: Rng>(&self, rng: &mut R) -> Vec<f64> {
        let u: f64 = rng.random_range(0.0..1.0);
        let mut acc = 0.0;
        let mut chosen = self.components.len() - 1;
        for (i, c) in self.components.iter().enumerate() {
            acc += c.weight;
            if u < acc {
                chosen = i;
                break;
            }
        }
        let c = &self.components[chosen];
        let std = c.variance.sqrt();
        c.mean
            .iter()
            .map(|&m| m + std * rng.sample::<f64, _>(rand_distr::StandardNormal))
            .collect()
    }
}

fn log_sum_exp(terms: &[f64]) -> f64 {
    let max = terms.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return max;
    }
    max + terms.iter().map(|t| (t - max).exp()).sum::<f64>().ln()
}

fn softmax(terms: &[f64]) -> Vec<f64> {
    let lse = log_sum_exp(terms);
    terms.iter().map(|t| (t - lse).exp()).collect()
}

/// A [`GradientPrior`] given by a mixture at a fixed noise level. Its
/// denoiser is the exact MMSE estimator E[x₀ | x₀ + ξ_σ = x] (Tweedie).
#[derive(Debug, Clone)]
pub struct GmmPrior {
    mixture: GaussianMixture,
    sigma: f64,
}

impl GmmPrior {
    pub fn new(mixture: GaussianMixture, sigma: f64) -> Result<Self> {
        if !(sigma >= 0.0) || !sigma.is_finite() {
            return Err(Error::InvalidParameter(format!(
                "noise level must be finite and nonnegative, got {sigma}"
            )));
        }
        Ok(GmmPrior { mixture, sigma })
    }

    pub fn mixture(&self) -> &GaussianMixture {
        &self.mixture
    }
}

impl GradientPrior for GmmPrior {
    fn sigma(&self) -> f64 {
        self.sigma
    }

    fn energy(&self, x: &Image) -> Result<f64> {
        self.mixture.smoothed_energy(self.sigma, x.data())
    }

    fn grad(&self, x: &Image) -> Result<Image> {
        let g = self.mixture.smoothed_energy_grad(self.sigma, x.data())?;
        Ok(x.with_data(g))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::prior::test_support::assert_grad_matches_fd;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn image_from(x: &[f64], w: usize, h: usize) -> Image {
        Image::from_vec(w, h, 1, x.to_vec()).unwrap()
    }

    fn random_mixture(n: usize, dim: usize, rng: &mut ChaCha8Rng) -> GaussianMixture {
        let raw: Vec<f64> = (0..n).map(|_| rng.random_range(0.2..1.0)).collect();
        let total: f64 = raw.iter().sum();
        let components = raw
            .into_iter()
            .map(|w| GmmComponent {
                weight: w / total,
                variance: rng.random_range(0.05..0.2),
                mean: (0..dim).map(|_| rng.random_range(-0.5..0.5)).collect(),
            })
            .collect();
        GaussianMixture::new(components).unwrap()
    }

    #[test]
    fn single_component_energy_is_closed_form() {
        let mixture = GaussianMixture::new(vec![GmmComponent {
            weight: 1.0,
            variance: 0.1,
            mean: vec![0.2, -0.1, 0.4, 0.0],
        }])
        .unwrap();
        let sigma = 0.3;
        let x = [0.5, 0.5, -0.5, 0.25];
        let var = 0.1 + sigma * sigma;
        let dist_sq: f64 = x
            .iter()
            .zip(&mixture.components()[0].mean)
            .map(|(a, b)| (a - b) * (a - b))
            .sum();
        let expect = -sigma * sigma
            * (-0.5 * dist_sq / var - 2.0 * (2.0 * std::f64::consts::PI * var).ln());
        assert!((mixture.smoothed_energy(sigma, &x).unwrap() - expect).abs() < 1e-12);
    }

    #[test]
    fn symmetric_two_component_gradient_vanishes_at_midpoint() {
        let mixture = GaussianMixture::new(vec![
            GmmComponent {
                weight: 0.5,
                variance: 0.1,
                mean: vec![0.3, 0.1],
            },
            GmmComponent {
                weight: 0.5,
                variance: 0.1,
                mean: vec![-0.3, -0.1],
            },
        ])
        .unwrap();
        let grad = mixture.smoothed_energy_grad(0.2, &[0.0, 0.0]).unwrap();
        for g in grad {
            assert!(g.abs() < 1e-15);
        }
    }

    #[test]
    fn single_gaussian_denoise_is_linear_mmse() {
        let mean = vec![0.25, -0.3, 0.5, 0.1];
        let v = 0.08;
        let sigma = 0.2;
        let mixture = GaussianMixture::new(vec![GmmComponent {
            weight: 1.0,
            variance: v,
            mean: mean.clone(),
        }])
        .unwrap();
        let prior = GmmPrior::new(mixture, sigma).unwrap();
        let x = image_from(&[0.9, 0.0, -0.4, 0.6], 4, 1);
        let d = prior.denoise(&x).unwrap();
        for i in 0..4 {
            let expect =
                x.data()[i] + sigma * sigma * (mean[i] - x.data()[i]) / (v + sigma * sigma);
            assert!((d.data()[i] - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn sigma_zero_denoiser_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mixture = random_mixture(3, 4, &mut rng);
        let prior = GmmPrior::new(mixture, 0.0).unwrap();
        let x = image_from(&[0.1, 0.7, -0.2, 0.4], 4, 1);
        assert_eq!(prior.denoise(&x).unwrap().data(), x.data());
        assert_eq!(prior.energy(&x).unwrap(), 0.0);
    }

    /// Exhaustive posterior-mean oracle: plain (non-log) responsibilities,
    /// E[x₀|x] = Σᵢ rᵢ (vᵢ·x + σ²·μᵢ)/(vᵢ+σ²).
    fn posterior_mean_oracle(m: &GaussianMixture, sigma: f64, x: &[f64]) -> Vec<f64> {
        let n = m.dim() as f64;
        let densities: Vec<f64> = m
            .components()
            .iter()
            .map(|c| {
                let var = c.variance + sigma * sigma;
                let dist_sq: f64 = x
                    .iter()
                    .zip(&c.mean)
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum();
                c.weight * (2.0 * std::f64::consts::PI * var).powf(-0.5 * n)
                    * (-0.5 * dist_sq / var).exp()
            })
            .collect();
        let total: f64 = densities.iter().sum();
        let mut out = vec![0.0; m.dim()];
        for (dens, c) in densities.iter().zip(m.components()) {
            let r = dens / total;
            let var = c.variance + sigma * sigma;
            for i in 0..m.dim() {
                out[i] += r * (c.variance * x[i] + sigma * sigma * c.mean[i]) / var;
            }
        }
        out
    }

    #[test]
    fn denoise_matches_exhaustive_posterior_mean() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mixture = random_mixture(5, 6, &mut rng);
        let prior = GmmPrior::new(mixture.clone(), 0.25).unwrap();
        for _ in 0..20 {
            let x: Vec<f64> = (0..6).map(|_| rng.random_range(-1.0..1.0)).collect();
            let d = prior.denoise(&image_from(&x, 6, 1)).unwrap();
            let oracle = posterior_mean_oracle(&mixture, 0.25, &x);
            for (a, b) in d.data().iter().zip(&oracle) {
                assert!((a - b).abs() < 1e-10, "{a} vs {b}");
            }
        }
    }

    #[test]
    fn tweedie_identity_holds() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mixture = random_mixture(4, 5, &mut rng);
        let sigma = 0.3;
        let prior = GmmPrior::new(mixture.clone(), sigma).unwrap();
        for _ in 0..20 {
            let x: Vec<f64> = (0..5).map(|_| rng.random_range(-1.0..1.0)).collect();
            // Independent ∇log p_σ oracle via plain responsibilities.
            let n = mixture.dim() as f64;
            let mut num = vec![0.0; 5];
            let mut total = 0.0;
            for c in mixture.components() {
                let var = c.variance + sigma * sigma;
                let dist_sq: f64 = x
                    .iter()
                    .zip(&c.mean)
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum();
                let dens = c.weight * (2.0 * std::f64::consts::PI * var).powf(-0.5 * n)
                    * (-0.5 * dist_sq / var).exp();
                total += dens;
                for i in 0..5 {
                    num[i] += dens * (c.mean[i] - x[i]) / var;
                }
            }
            let d = prior.denoise(&image_from(&x, 5, 1)).unwrap();
            for i in 0..5 {
                let tweedie = x[i] + sigma * sigma * num[i] / total;
                assert!((d.data()[i] - tweedie).abs() < 1e-10);
            }
        }
    }

    /// Gauss–Hermite tensor quadrature of the smoothing integral
    /// p_σ(x) = E_{ξ~N(0,σ²I)}[p(x−ξ)]; nodes and weights from the
    /// Golub–Welsch eigen decomposition of the Jacobi matrix.
    fn gauss_hermite(nodes: usize) -> (Vec<f64>, Vec<f64>) {
        let mut jacobi = nalgebra::DMatrix::zeros(nodes, nodes);
        for k in 1..nodes {
            let b = (k as f64 / 2.0).sqrt();
            jacobi[(k - 1, k)] = b;
            jacobi[(k, k - 1)] = b;
        }
        let eig = nalgebra::SymmetricEigen::new(jacobi);
        let mut pairs: Vec<(f64, f64)> = (0..nodes)
            .map(|i| {
                let node = eig.eigenvalues[i];
                let w = std::f64::consts::PI.sqrt() * eig.eigenvectors[(0, i)].powi(2);
                (node, w)
            })
            .collect();
        pairs.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
        pairs.into_iter().unzip()
    }

    #[test]
    fn energy_matches_quadrature_of_smoothing_integral() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let dim = 4;
        let mixture = random_mixture(3, dim, &mut rng);
        let sigma = 0.25;
        let x: Vec<f64> = (0..dim).map(|_| rng.random_range(-0.5..0.5)).collect();

        let density = |p: &[f64]| -> f64 {
            let n = dim as f64;
            mixture
                .components()
                .iter()
                .map(|c| {
                    let dist_sq: f64 = p
                        .iter()
                        .zip(&c.mean)
                        .map(|(a, b)| (a - b) * (a - b))
                        .sum();
                    c.weight * (2.0 * std::f64::consts::PI * c.variance).powf(-0.5 * n)
                        * (-0.5 * dist_sq / c.variance).exp()
                })
                .sum()
        };

        let (nodes, weights) = gauss_hermite(24);
        let m = nodes.len();
        let mut integral = 0.0;
        let mut idx = vec![0usize; dim];
        loop {
            let mut weight = 1.0;
            let mut point = vec![0.0; dim];
            for d in 0..dim {
                weight *= weights[idx[d]];
                point[d] = x[d] - std::f64::consts::SQRT_2 * sigma * nodes[idx[d]];
            }
            integral += weight * density(&point);
            // Advance the tensor-product multi-index.
            let mut d = 0;
            loop {
                idx[d] += 1;
                if idx[d] < m {
                    break;
                }
                idx[d] = 0;
                d += 1;
                if d == dim {
                    break;
                }
            }
            if d == dim {
                break;
            }
        }
        let p_sigma = integral / std::f64::consts::PI.powf(dim as f64 / 2.0);
        let oracle_energy = -sigma * sigma * p_sigma.ln();
        let energy = mixture.smoothed_energy(sigma, &x).unwrap();
        assert!(
            (energy - oracle_energy).abs() < 1e-6,
            "{energy} vs quadrature {oracle_energy}"
        );
    }

    #[test]
    fn grad_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mixture = random_mixture(3, 8, &mut rng);
        let prior = GmmPrior::new(mixture, 0.2).unwrap();
        for _ in 0..5 {
            let x: Vec<f64> = (0..8).map(|_| rng.random_range(-1.0..1.0)).collect();
            assert_grad_matches_fd(&prior, &image_from(&x, 4, 2), 1e-5);
        }
    }

    #[test]
    fn file_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mixture = random_mixture(3, 4, &mut rng);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("mix.txt");
        mixture.save(&path).unwrap();
        let back = GaussianMixture::load(&path).unwrap();
        assert_eq!(back.dim(), 4);
        for (a, b) in mixture.components().iter().zip(back.components()) {
            assert_eq!(a.weight, b.weight);
            assert_eq!(a.variance, b.variance);
            assert_eq!(a.mean, b.mean);
        }
    }

    #[test]
    fn validation_rejects_bad_mixtures() {
        assert!(GaussianMixture::new(vec![]).is_err());
        assert!(GaussianMixture::new(vec![GmmComponent {
            weight: 0.5,
            variance: 0.1,
            mean: vec![0.0],
        }])
        .is_err());
        assert!(GaussianMixture::new(vec![GmmComponent {
            weight: 1.0,
            variance: 0.0,
            mean: vec![0.0],
        }])
        .is_err());
        let prior = GmmPrior::new(
            GaussianMixture::new(vec![GmmComponent {
                weight: 1.0,
                variance: 0.1,
                mean: vec![0.0, 0.0],
            }])
            .unwrap(),
            0.1,
        )
        .unwrap();
        let x = Image::zeros(3, 1, 1).unwrap();
        assert!(prior.energy(&x).is_err());
    }
}
