//! Desk-scale denoising training of the network prior.
//!
//! The loss is the denoising MSE `E‖D_σ(x+ξ_σ)−x‖²`, equivalently
//! `E‖∇g_σ(x+ξ_σ)−ξ_σ‖²` since D_σ = Id − ∇g_σ. Because D_σ itself contains
//! a transpose-Jacobian product, the parameter gradient needs reverse-mode
//! through the unrolled VJP: the inner reverse pass is a composition of the
//! same conv/ELU primitives, so its own adjoints are convs, transpose convs
//! and elementwise gates carrying the second derivative of ELU. No generic
//! autodiff engine is involved; correctness is gated by the
//! finite-difference tests below.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::image::Image;
use crate::prior::network::{elu_prime, elu_second, FeatureMap, GsNetwork};
use crate::prior::GaussianMixture;

/// Where clean training images come from.
#[derive(Debug, Clone)]
pub enum DataSource {
    /// Samples of an analytic mixture, reshaped onto a fixed small grid.
    GmmSamples {
        mixture: GaussianMixture,
        width: usize,
        height: usize,
        channels: usize,
    },
    /// Random piecewise-constant rasters over smooth gradients; edge-bearing
    /// data a small denoiser can learn, with no dataset shipping.
    SyntheticImages {
        width: usize,
        height: usize,
        channels: usize,
    },
}

impl DataSource {
    pub fn gmm(mixture: GaussianMixture, width: usize, height: usize, channels: usize) -> Result<Self> {
        if mixture.dim() != width * height * channels {
            return Err(Error::dims(
                "DataSource::gmm",
                mixture.dim(),
                width * height * channels,
            ));
        }
        Ok(DataSource::GmmSamples {
            mixture,
            width,
            height,
            channels,
        })
    }

    pub fn synthetic(width: usize, height: usize, channels: usize) -> Self {
        DataSource::SyntheticImages {
            width,
            height,
            channels,
        }
    }

    fn draw(&self, rng: &mut ChaCha8Rng) -> Result<Image> {
        match self {
            DataSource::GmmSamples {
                mixture,
                width,
                height,
                channels,
            } => {
                // Mixture samples are unconstrained reals; clamp for image
                // validity is not wanted here, the mixture is the truth.
                Image::from_vec(*width, *height, *channels, mixture.sample(rng))
            }
            DataSource::SyntheticImages {
                width,
                height,
                channels,
            } => Ok(synthetic_image(*width, *height, *channels, rng)),
        }
    }
}

/// Random piecewise-constant rectangles over a smooth gradient base, all
/// values inside [0,1].
pub fn synthetic_image(width: usize, height: usize, channels: usize, rng: &mut ChaCha8Rng) -> Image {
    let mut data = vec![0.0; width * height * channels];
    let base: f64 = rng.random_range(0.3..0.7);
    let gx: f64 = rng.random_range(-0.2..0.2);
    let gy: f64 = rng.random_range(-0.2..0.2);
    for c in 0..channels {
        let offset: f64 = if channels == 1 { 0.0 } else { rng.random_range(-0.1..0.1) };
        for y in 0..height {
            for x in 0..width {
                let v = base
                    + offset
                    + gx * (x as f64 / width as f64 - 0.5)
                    + gy * (y as f64 / height as f64 - 0.5);
                data[(c * height + y) * width + x] = v.clamp(0.0, 1.0);
            }
        }
    }
    let rects = rng.random_range(2..6);
    for _ in 0..rects {
        let x0 = rng.random_range(0..width);
        let y0 = rng.random_range(0..height);
        let x1 = rng.random_range(x0..width.min(x0 + width / 2 + 1)) + 1;
        let y1 = rng.random_range(y0..height.min(y0 + height / 2 + 1)) + 1;
        let value: f64 = rng.random_range(0.05..0.95);
        for c in 0..channels {
            let offset: f64 = if channels == 1 { 0.0 } else { rng.random_range(-0.05..0.05) };
            for y in y0..y1.min(height) {
                for x in x0..x1.min(width) {
                    data[(c * height + y) * width + x] = (value + offset).clamp(0.0, 1.0);
                }
            }
        }
    }
    Image::from_vec(width, height, channels, data).expect("synthetic samples are in range")
}

#[derive(Debug, Clone)]
pub struct TrainConfig {
    /// Upper bound of the per-sample noise range; σ ~ Uniform(0, σ_max).
    pub sigma_max: f64,
    pub batch_size: usize,
    pub steps: usize,
    pub learning_rate: f64,
    pub seed: u64,
    pub data_source: DataSource,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.sigma_max >= 0.0) || !self.sigma_max.is_finite() {
            return Err(Error::InvalidParameter(format!(
                "sigma_max must be finite and nonnegative, got {}",
                self.sigma_max
            )));
        }
        if !(self.learning_rate >= 0.0) || !self.learning_rate.is_finite() {
            return Err(Error::InvalidParameter(format!(
                "learning rate must be finite and nonnegative, got {}",
                self.learning_rate
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidParameter("batch size must be at least 1".into()));
        }
        if self.steps == 0 {
            return Err(Error::InvalidParameter("steps must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct TrainSample {
    pub clean: Image,
    pub noisy: Image,
    pub sigma: f64,
}

/// Draws a batch: clean from the data source, σ uniform in [0, σ_max]
/// independently per item, noisy = clean + N(0, σ²).
pub fn sample_training_batch(cfg: &TrainConfig, rng: &mut ChaCha8Rng) -> Result<Vec<TrainSample>> {
    let mut batch = Vec::with_capacity(cfg.batch_size);
    for _ in 0..cfg.batch_size {
        let clean = cfg.data_source.draw(rng)?;
        let sigma = if cfg.sigma_max > 0.0 {
            rng.random_range(0.0..cfg.sigma_max)
        } else {
            0.0
        };
        let noisy = if sigma > 0.0 {
            clean.map(|v| v + sigma * rng.sample::<f64, _>(rand_distr::StandardNormal))
        } else {
            clean.clone()
        };
        batch.push(TrainSample {
            clean,
            noisy,
            sigma,
        });
    }
    Ok(batch)
}

/// Per-layer parameter gradients (weights, bias), matching the network's
/// layer order.
#[derive(Debug, Clone)]
pub struct ParamGrad {
    pub layers: Vec<(Vec<f64>, Vec<f64>)>,
}

impl ParamGrad {
    fn zeros_like(net: &GsNetwork) -> Self {
        ParamGrad {
            layers: net
                .layers()
                .iter()
                .map(|l| (vec![0.0; l.weights().len()], vec![0.0; l.bias().len()]))
                .collect(),
        }
    }

    fn accumulate(&mut self, other: &ParamGrad) {
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            for (x, y) in a.0.iter_mut().zip(&b.0) {
                *x += y;
            }
            for (x, y) in a.1.iter_mut().zip(&b.1) {
                *x += y;
            }
        }
    }

    fn scale(&mut self, s: f64) {
        for layer in &mut self.layers {
            for v in layer.0.iter_mut().chain(layer.1.iter_mut()) {
                *v *= s;
            }
        }
    }

    pub fn norm(&self) -> f64 {
        self.layers
            .iter()
            .flat_map(|l| l.0.iter().chain(l.1.iter()))
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.layers
            .iter()
            .flat_map(|l| l.0.iter().chain(l.1.iter()))
            .all(|v| v.is_finite())
    }
}

fn fm_zip(a: &FeatureMap, b: &FeatureMap, f: impl Fn(f64, f64) -> f64) -> FeatureMap {
    debug_assert_eq!(a.data.len(), b.data.len());
    FeatureMap {
        channels: a.channels,
        width: a.width,
        height: a.height,
        data: a.data.iter().zip(&b.data).map(|(&x, &y)| f(x, y)).collect(),
    }
}

/// Appends one zero plane (the σ-channel slot of the input cotangent).
fn fm_pad_zero_channel(a: &FeatureMap) -> FeatureMap {
    let n = a.width * a.height;
    let mut data = a.data.clone();
    data.extend(std::iter::repeat(0.0).take(n));
    FeatureMap {
        channels: a.channels + 1,
        width: a.width,
        height: a.height,
        data,
    }
}

/// Denoised estimate D_σ(x) = N_σ(x) + J_{N_σ}(x)ᵀ(x − N_σ(x)).
pub fn denoise_sample(net: &GsNetwork, x: &Image, sigma: f64) -> Result<Image> {
    let cache = net.forward_cached(x, sigma)?;
    let n = cache.output().leading_channels_as_image(x.channels(), x);
    let r = x.sub(&n);
    let vjp = net.vjp_cached(&cache, &FeatureMap::from_image(&r));
    let q = vjp.input_cotangent.leading_channels_as_image(x.channels(), x);
    Ok(n.add(&q))
}

/// One sample's squared denoising error and its exact parameter gradient.
///
/// Forward: a₀ = cat(x, σ); zₗ = convₗ(aₗ); aₗ₊₁ = ELU(zₗ) except a linear
/// last layer; N = a_L; r = x − N. Inner reverse (the VJP):
/// s_l = w_{l+1} ⊙ φ′(z_l), w_l = convₗᵀ(s_l) starting from w_L = r; then
/// D = N + (w₀ restricted to image channels) and ℓ = ‖D − clean‖².
/// The outer reverse pass below walks both stages backwards; the VJP stage
/// contributes weight cotangents through the transpose convs and z-cotangents
/// through the ELU″ gates.
fn sample_loss_and_grad(
    net: &GsNetwork,
    clean: &Image,
    noisy: &Image,
    sigma: f64,
) -> Result<(f64, ParamGrad)> {
    let c = clean.channels();
    let layer_count = net.layers().len();

    let cache = net.forward_cached(noisy, sigma)?;
    let n_img = cache.output().leading_channels_as_image(c, noisy);
    let residual = noisy.sub(&n_img);
    let vjp = net.vjp_cached(&cache, &FeatureMap::from_image(&residual));
    let q = vjp.input_cotangent.leading_channels_as_image(c, noisy);
    let denoised = n_img.add(&q);
    let error = denoised.sub(clean);
    let loss = error.norm_sq();

    let mut grad = ParamGrad::zeros_like(net);

    // Seed: ℓ = ‖e‖², D = N + q.
    let ebar = FeatureMap::from_image(&error.scale(2.0));
    // q = leading channels of w₀; its adjoint zero-pads the σ slot.
    let mut wbar = fm_pad_zero_channel(&ebar);
    let mut zbar_vjp: Vec<Option<FeatureMap>> = vec![None; layer_count];

    // Reverse of the inner VJP sweep (which ran l = L−1 .. 0).
    for l in 0..layer_count {
        let layer = &net.layers()[l];
        // w_l = convₗᵀ(s_l): cotangent of s_l is the forward conv (no bias);
        // the weight cotangent contracts s_l against w̄_l.
        let sbar = layer.forward_linear(&wbar);
        let dw = layer.weight_gradient(&vjp.gated[l], &wbar);
        for (g, d) in grad.layers[l].0.iter_mut().zip(&dw) {
            *g += d;
        }
        if l + 1 < layer_count {
            // s_l = w_{l+1} ⊙ ELU′(z_l): product rule sends one branch to
            // w̄_{l+1} and one through ELU″ into z̄_l.
            let z = &cache.pre[l];
            let w_in = &vjp.incoming[l];
            zbar_vjp[l] = Some(FeatureMap {
                channels: sbar.channels,
                width: sbar.width,
                height: sbar.height,
                data: sbar
                    .data
                    .iter()
                    .zip(&w_in.data)
                    .zip(&z.data)
                    .map(|((&s, &w), &zv)| s * w * elu_second(zv))
                    .collect(),
            });
            wbar = fm_zip(&sbar, z, |s, zv| s * elu_prime(zv));
        } else {
            wbar = sbar;
        }
    }

    // w_L = r and r = x − N: N̄ = ē − w̄_L.
    let nbar = fm_zip(&ebar, &wbar, |e, r| e - r);

    // Reverse of the forward sweep; the cotangent at a₀ is never needed.
    let mut abar = nbar;
    for l in (0..layer_count).rev() {
        let layer = &net.layers()[l];
        let mut zbar = if l + 1 < layer_count {
            fm_zip(&abar, &cache.pre[l], |a, z| a * elu_prime(z))
        } else {
            abar.clone()
        };
        if let Some(extra) = &zbar_vjp[l] {
            zbar = fm_zip(&zbar, extra, |a, b| a + b);
        }
        let dw = layer.weight_gradient(&zbar, &cache.post[l]);
        for (g, d) in grad.layers[l].0.iter_mut().zip(&dw) {
            *g += d;
        }
        let db = layer.bias_gradient(&zbar);
        for (g, d) in grad.layers[l].1.iter_mut().zip(&db) {
            *g += d;
        }
        if l > 0 {
            abar = layer.input_adjoint(&zbar);
        }
    }

    Ok((loss, grad))
}

/// Mean denoising loss over a batch and its parameter gradient.
pub fn denoiser_loss(net: &GsNetwork, batch: &[TrainSample]) -> Result<(f64, ParamGrad)> {
    if batch.is_empty() {
        return Err(Error::InvalidParameter("denoiser_loss needs a nonempty batch".into()));
    }
    let mut total = 0.0;
    let mut grad = ParamGrad::zeros_like(net);
    for sample in batch {
        let (loss, g) = sample_loss_and_grad(net, &sample.clean, &sample.noisy, sample.sigma)?;
        total += loss;
        grad.accumulate(&g);
    }
    let inv = 1.0 / batch.len() as f64;
    grad.scale(inv);
    Ok((total * inv, grad))
}

/// Mean denoising loss only (validation; no gradient work).
pub fn evaluate_loss(net: &GsNetwork, batch: &[TrainSample]) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::InvalidParameter("evaluate_loss needs a nonempty batch".into()));
    }
    let mut total = 0.0;
    for sample in batch {
        let d = denoise_sample(net, &sample.noisy, sample.sigma)?;
        total += d.sub(&sample.clean).norm_sq();
    }
    Ok(total / batch.len() as f64)
}

/// Adam with the standard defaults (β₁ = 0.9, β₂ = 0.999, ε = 1e-8); the
/// learning rate is the only externally chosen hyperparameter.
pub struct Adam {
    learning_rate: f64,
    beta1: f64,
    beta2: f64,
    epsilon: f64,
    step: usize,
    m: Vec<(Vec<f64>, Vec<f64>)>,
    v: Vec<(Vec<f64>, Vec<f64>)>,
}

impl Adam {
    pub fn new(learning_rate: f64, net: &GsNetwork) -> Self {
        let zeros: Vec<(Vec<f64>, Vec<f64>)> = net
            .layers()
            .iter()
            .map(|l| (vec![0.0; l.weights().len()], vec![0.0; l.bias().len()]))
            .collect();
        Adam {
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    pub fn apply(&mut self, net: &mut GsNetwork, grad: &ParamGrad) {
        self.step += 1;
        let t = self.step as i32;
        let lr_t = self.learning_rate * (1.0 - self.beta2.powi(t)).sqrt()
            / (1.0 - self.beta1.powi(t));
        for (l, layer) in net.layers_mut().iter_mut().enumerate() {
            let update = |param: &mut [f64], g: &[f64], m: &mut [f64], v: &mut [f64]| {
                for i in 0..param.len() {
                    m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g[i];
                    v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g[i] * g[i];
                    param[i] -= lr_t * m[i] / (v[i].sqrt() + self.epsilon);
                }
            };
            update(
                layer.weights_mut(),
                &grad.layers[l].0,
                &mut self.m[l].0,
                &mut self.v[l].0,
            );
            update(
                layer.bias_mut(),
                &grad.layers[l].1,
                &mut self.m[l].1,
                &mut self.v[l].1,
            );
        }
    }
}

#[derive(Debug, Clone, serde::Serialize)]
pub struct TrainRecord {
    pub step: usize,
    pub loss: f64,
    pub sigma_mean: f64,
    pub grad_norm: f64,
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub step: usize,
    pub network: GsNetwork,
}

#[derive(Debug)]
pub struct TrainOutcome {
    pub network: GsNetwork,
    pub history: Vec<TrainRecord>,
    /// Start / middle / end snapshots, for convergence-toward-MMSE checks.
    pub checkpoints: Vec<Checkpoint>,
}

/// Runs Adam for `cfg.steps` steps; fully deterministic under `cfg.seed`.
/// A non-finite loss aborts with the history gathered so far attached.
pub fn train(net: &GsNetwork, cfg: &TrainConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut network = net.clone();
    let mut optimizer = Adam::new(cfg.learning_rate, &network);
    let mut history = Vec::with_capacity(cfg.steps);
    let mut checkpoints = vec![Checkpoint {
        step: 0,
        network: network.clone(),
    }];
    let mid = (cfg.steps / 2).max(1);
    for step in 1..=cfg.steps {
        let batch = sample_training_batch(cfg, &mut rng)?;
        let (loss, grad) = denoiser_loss(&network, &batch)?;
        if !loss.is_finite() || !grad.is_finite() {
            return Err(Error::TrainingDiverged { step, history });
        }
        let sigma_mean = batch.iter().map(|s| s.sigma).sum::<f64>() / batch.len() as f64;
        history.push(TrainRecord {
            step,
            loss,
            sigma_mean,
            grad_norm: grad.norm(),
        });
        optimizer.apply(&mut network, &grad);
        if step == mid {
            checkpoints.push(Checkpoint {
                step,
                network: network.clone(),
            });
        }
    }
    checkpoints.push(Checkpoint {
        step: cfg.steps,
        network: network.clone(),
    });
    Ok(TrainOutcome {
        network,
        history,
        checkpoints,
    })
}

/// Loss-history CSV: `step, loss, sigma_mean, grad_norm`.
pub fn history_to_csv(history: &[TrainRecord]) -> String {
    let mut out = String::from("step,loss,sigma_mean,grad_norm\n");
    for r in history {
        out.push_str(&format!(
            "{},{},{},{}\n",
            r.step,
            crate::solver::format_float(r.loss),
            crate::solver::format_float(r.sigma_mean),
            crate::solver::format_float(r.grad_norm)
        ));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::prior::{GmmComponent, GradientPrior, NetworkPrior};

    fn scalar_mixture() -> GaussianMixture {
        GaussianMixture::new(vec![
            GmmComponent {
                weight: 0.5,
                variance: 0.003,
                mean: vec![0.25],
            },
            GmmComponent {
                weight: 0.5,
                variance: 0.003,
                mean: vec![0.75],
            },
        ])
        .unwrap()
    }

    fn small_cfg(source: DataSource) -> TrainConfig {
        TrainConfig {
            sigma_max: 50.0 / 255.0,
            batch_size: 4,
            steps: 10,
            learning_rate: 1e-3,
            seed: 7,
            data_source: source,
        }
    }

    #[test]
    fn batches_are_deterministic_under_seed() {
        let cfg = small_cfg(DataSource::synthetic(6, 6, 1));
        let b1 = sample_training_batch(&cfg, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        let b2 = sample_training_batch(&cfg, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        for (a, b) in b1.iter().zip(&b2) {
            assert_eq!(a.clean.data(), b.clean.data());
            assert_eq!(a.noisy.data(), b.noisy.data());
            assert_eq!(a.sigma, b.sigma);
        }
    }

    #[test]
    fn zero_sigma_max_yields_clean_batches() {
        let mut cfg = small_cfg(DataSource::synthetic(5, 5, 1));
        cfg.sigma_max = 0.0;
        let batch = sample_training_batch(&cfg, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        for s in &batch {
            assert_eq!(s.clean.data(), s.noisy.data());
            assert_eq!(s.sigma, 0.0);
        }
    }

    #[test]
    fn gmm_batch_mean_matches_mixture_mean() {
        let mixture = scalar_mixture();
        let cfg = TrainConfig {
            batch_size: 10_000,
            ..small_cfg(DataSource::gmm(mixture.clone(), 1, 1, 1).unwrap())
        };
        let batch = sample_training_batch(&cfg, &mut ChaCha8Rng::seed_from_u64(11)).unwrap();
        let empirical: f64 =
            batch.iter().map(|s| s.clean.data()[0]).sum::<f64>() / batch.len() as f64;
        // Per-coordinate mixture variance: Σw(v+μ²) − mean².
        let mean = mixture.mean()[0];
        let var: f64 = mixture
            .components()
            .iter()
            .map(|c| c.weight * (c.variance + c.mean[0] * c.mean[0]))
            .sum::<f64>()
            - mean * mean;
        let se = (var / batch.len() as f64).sqrt();
        assert!(
            (empirical - mean).abs() < 3.0 * se,
            "empirical mean {empirical} vs {mean} (3se = {})",
            3.0 * se
        );
    }

    #[test]
    fn loss_forms_agree_per_sample() {
        // ‖D(x+ξ)−x‖² = ‖∇g(x+ξ)−ξ‖², the Id−∇g identity per sample.
        let net = GsNetwork::random(1, 6, 3, 3, 5);
        let cfg = small_cfg(DataSource::synthetic(6, 6, 1));
        let batch = sample_training_batch(&cfg, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        for s in &batch {
            let prior = NetworkPrior::new(net.clone(), s.sigma).unwrap();
            let denoiser_form = prior.denoise(&s.noisy).unwrap().sub(&s.clean).norm_sq();
            let xi = s.noisy.sub(&s.clean);
            let gradient_form = prior.grad(&s.noisy).unwrap().sub(&xi).norm_sq();
            let tol = 1e-12 * denoiser_form.max(1.0);
            assert!(
                (denoiser_form - gradient_form).abs() < tol,
                "{denoiser_form} vs {gradient_form}"
            );
        }
    }

    #[test]
    fn parameter_gradient_matches_finite_differences() {
        let net = GsNetwork::random(1, 4, 3, 3, 9);
        let cfg = TrainConfig {
            batch_size: 3,
            ..small_cfg(DataSource::synthetic(5, 5, 1))
        };
        let batch = sample_training_batch(&cfg, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
        let (_, grad) = denoiser_loss(&net, &batch).unwrap();

        // Probe 10 scattered weight coordinates plus a bias.
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let h = 1e-6;
        for probe in 0..10 {
            let l = rng.random_range(0..net.layers().len());
            let widx = rng.random_range(0..net.layers()[l].weights().len());
            let perturbed = |delta: f64| -> f64 {
                let mut n2 = net.clone();
                n2.layers_mut()[l].weights_mut()[widx] += delta;
                evaluate_loss(&n2, &batch).unwrap()
            };
            let fd = (perturbed(h) - perturbed(-h)) / (2.0 * h);
            let analytic = grad.layers[l].0[widx];
            let rel = (fd - analytic).abs() / fd.abs().max(1e-8);
            assert!(
                rel < 1e-4,
                "probe {probe}: layer {l} weight {widx}: fd {fd} vs {analytic} (rel {rel})"
            );
        }
        let bias_fd = {
            let mut n2 = net.clone();
            n2.layers_mut()[1].bias_mut()[0] += h;
            let plus = evaluate_loss(&n2, &batch).unwrap();
            n2.layers_mut()[1].bias_mut()[0] -= 2.0 * h;
            let minus = evaluate_loss(&n2, &batch).unwrap();
            (plus - minus) / (2.0 * h)
        };
        let rel = (bias_fd - grad.layers[1].1[0]).abs() / bias_fd.abs().max(1e-8);
        assert!(rel < 1e-4, "bias gradient: fd {bias_fd} (rel {rel})");
    }

    #[test]
    fn zero_learning_rate_leaves_weights_unchanged() {
        let net = GsNetwork::random(1, 4, 2, 3, 1);
        let cfg = TrainConfig {
            learning_rate: 0.0,
            steps: 3,
            ..small_cfg(DataSource::synthetic(4, 4, 1))
        };
        let outcome = train(&net, &cfg).unwrap();
        for (a, b) in net.layers().iter().zip(outcome.network.layers()) {
            assert_eq!(a.weights(), b.weights());
            assert_eq!(a.bias(), b.bias());
        }
    }

    #[test]
    fn training_is_deterministic_and_history_finite() {
        let net = GsNetwork::random(1, 4, 3, 3, 2);
        let cfg = TrainConfig {
            steps: 20,
            ..small_cfg(DataSource::gmm(scalar_mixture(), 1, 1, 1).unwrap())
        };
        let o1 = train(&net, &cfg).unwrap();
        let o2 = train(&net, &cfg).unwrap();
        assert_eq!(o1.history.len(), 20);
        for (a, b) in o1.history.iter().zip(&o2.history) {
            assert!(a.loss.is_finite() && a.grad_norm.is_finite());
            assert_eq!(a.loss, b.loss);
        }
        for (a, b) in o1.network.layers().iter().zip(o2.network.layers()) {
            assert_eq!(a.weights(), b.weights());
        }
        assert_eq!(o1.checkpoints.len(), 3);
    }

    #[test]
    fn loss_trends_downward() {
        let net = GsNetwork::random(1, 8, 4, 3, 3);
        let cfg = TrainConfig {
            steps: 300,
            batch_size: 8,
            learning_rate: 3e-3,
            ..small_cfg(DataSource::gmm(scalar_mixture(), 1, 1, 1).unwrap())
        };
        let outcome = train(&net, &cfg).unwrap();
        let n = outcome.history.len();
        let head: f64 = outcome.history[..n / 10].iter().map(|r| r.loss).sum::<f64>() / (n / 10) as f64;
        let tail: f64 = outcome.history[n - n / 10..].iter().map(|r| r.loss).sum::<f64>() / (n / 10) as f64;
        assert!(
            tail < head,
            "training loss did not decrease: first decile {head}, last decile {tail}"
        );
    }
}
