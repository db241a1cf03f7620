//! Planar multichannel image container, quality metrics and noise synthesis.
//!
//! Samples are stored as `f64` (convergence diagnostics go down to 1e-12
//! residuals, which single precision cannot resolve), row-major within each
//! channel plane, channel-planar overall, nominal range [0,1]. Iterates of
//! the solver may leave [0,1]; nothing here clamps except 8-bit export.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};

/// Planar multichannel floating-point raster.
///
/// Immutable after construction: all operations are pure and return new
/// images, so sharing across threads is safe.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    width: usize,
    height: usize,
    channels: usize,
    data: Vec<f64>,
}

impl Image {
    /// All-zero image. Width and height must be at least 1; channels 1 or 3.
    pub fn zeros(width: usize, height: usize, channels: usize) -> Result<Self> {
        check_shape(width, height, channels)?;
        Ok(Image {
            width,
            height,
            channels,
            data: vec![0.0; width * height * channels],
        })
    }

    /// Constant-valued image.
    pub fn constant(width: usize, height: usize, channels: usize, value: f64) -> Result<Self> {
        if !value.is_finite() {
            return Err(Error::NonFinite("Image::constant"));
        }
        check_shape(width, height, channels)?;
        Ok(Image {
            width,
            height,
            channels,
            data: vec![value; width * height * channels],
        })
    }

    /// Builds an image from channel-planar row-major samples.
    ///
    /// Rejects length mismatches and non-finite samples.
    pub fn from_vec(width: usize, height: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        check_shape(width, height, channels)?;
        let expected = width * height * channels;
        if data.len() != expected {
            return Err(Error::dims("Image::from_vec", expected, data.len()));
        }
        if !data.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite("Image::from_vec"));
        }
        Ok(Image {
            width,
            height,
            channels,
            data,
        })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    /// Total number of samples (width × height × channels).
    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn same_shape(&self, other: &Image) -> bool {
        self.width == other.width && self.height == other.height && self.channels == other.channels
    }

    pub(crate) fn shape_string(&self) -> String {
        format!("{}x{}x{}", self.width, self.height, self.channels)
    }

    /// One channel plane, row-major.
    pub fn plane(&self, channel: usize) -> &[f64] {
        assert!(channel < self.channels, "channel out of range");
        let n = self.width * self.height;
        &self.data[channel * n..(channel + 1) * n]
    }

    pub fn get(&self, channel: usize, y: usize, x: usize) -> f64 {
        assert!(channel < self.channels && y < self.height && x < self.width);
        self.data[(channel * self.height + y) * self.width + x]
    }

    /// Rebuilds an image of the same shape from raw samples; internal
    /// arithmetic only, skips the finiteness scan.
    pub(crate) fn with_data(&self, data: Vec<f64>) -> Image {
        debug_assert_eq!(data.len(), self.data.len());
        Image {
            width: self.width,
            height: self.height,
            channels: self.channels,
            data,
        }
    }

    pub fn map(&self, mut f: impl FnMut(f64) -> f64) -> Image {
        self.with_data(self.data.iter().map(|&v| f(v)).collect())
    }

    /// Elementwise combination; panics on shape mismatch (internal arithmetic
    /// is always shape-checked at the operation boundary).
    pub fn zip_map(&self, other: &Image, f: impl Fn(f64, f64) -> f64) -> Image {
        assert!(self.same_shape(other), "zip_map: shape mismatch");
        self.with_data(
            self.data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        )
    }

    pub fn add(&self, other: &Image) -> Image {
        self.zip_map(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Image) -> Image {
        self.zip_map(other, |a, b| a - b)
    }

    pub fn scale(&self, s: f64) -> Image {
        self.map(|v| v * s)
    }

    /// self + s·other.
    pub fn add_scaled(&self, other: &Image, s: f64) -> Image {
        self.zip_map(other, |a, b| a + s * b)
    }

    pub fn dot(&self, other: &Image) -> f64 {
        assert!(self.same_shape(other), "dot: shape mismatch");
        self.data.iter().zip(&other.data).map(|(a, b)| a * b).sum()
    }

    pub fn norm_sq(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum()
    }

    pub fn norm(&self) -> f64 {
        self.norm_sq().sqrt()
    }

    pub fn max_abs_diff(&self, other: &Image) -> f64 {
        assert!(self.same_shape(other), "max_abs_diff: shape mismatch");
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

fn check_shape(width: usize, height: usize, channels: usize) -> Result<()> {
    if width == 0 || height == 0 {
        return Err(Error::InvalidParameter(format!(
            "image dimensions must be at least 1x1, got {width}x{height}"
        )));
    }
    if channels != 1 && channels != 3 {
        return Err(Error::UnsupportedChannels(channels));
    }
    Ok(())
}

/// Peak signal-to-noise ratio in decibels, peak value fixed at 1.0.
///
/// Returns `f64::INFINITY` when the two images are identical.
pub fn psnr(reference: &Image, test: &Image) -> Result<f64> {
    if !reference.same_shape(test) {
        return Err(Error::dims(
            "psnr",
            reference.shape_string(),
            test.shape_string(),
        ));
    }
    let n = reference.len() as f64;
    let mse = reference.sub(test).norm_sq() / n;
    if mse == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (1.0 / mse).log10())
}

/// Adds white Gaussian noise with standard deviation `nu`.
///
/// The seed fully determines the output; `nu = 0` returns the input
/// bit-for-bit.
pub fn add_gaussian_noise(x: &Image, nu: f64, seed: u64) -> Result<Image> {
    if !(nu >= 0.0) {
        return Err(Error::InvalidParameter(format!(
            "noise standard deviation must be nonnegative, got {nu}"
        )));
    }
    if nu == 0.0 {
        return Ok(x.clone());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, nu).expect("finite nonnegative std");
    Ok(x.map(|v| v + normal.sample(&mut rng)))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp(width: usize, height: usize, channels: usize) -> Image {
        let n = width * height * channels;
        Image::from_vec(
            width,
            height,
            channels,
            (0..n).map(|i| i as f64 / n as f64).collect(),
        )
        .unwrap()
    }

    #[test]
    fn psnr_identical_is_infinite() {
        let a = ramp(7, 5, 3);
        assert_eq!(psnr(&a, &a).unwrap(), f64::INFINITY);
    }

    #[test]
    fn psnr_zeros_vs_ones_is_zero_db() {
        let a = Image::zeros(4, 4, 1).unwrap();
        let b = Image::constant(4, 4, 1, 1.0).unwrap();
        assert!((psnr(&a, &b).unwrap() - 0.0).abs() < 1e-12);
    }

    #[test]
    fn psnr_constant_offset_is_twenty_db() {
        let a = ramp(8, 8, 1);
        let b = a.map(|v| v + 0.1);
        assert!((psnr(&a, &b).unwrap() - 20.0).abs() < 1e-9);
    }

    #[test]
    fn psnr_symmetric() {
        let a = ramp(6, 4, 1);
        let b = a.map(|v| 0.9 * v + 0.01);
        assert_eq!(psnr(&a, &b).unwrap(), psnr(&b, &a).unwrap());
    }

    #[test]
    fn psnr_rejects_dimension_mismatch() {
        let a = ramp(4, 4, 1);
        let b = ramp(5, 4, 1);
        assert!(matches!(
            psnr(&a, &b),
            Err(Error::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn noise_zero_nu_is_identity() {
        let a = ramp(9, 3, 3);
        let b = add_gaussian_noise(&a, 0.0, 42).unwrap();
        assert_eq!(a.data(), b.data());
    }

    #[test]
    fn noise_deterministic_under_seed() {
        let a = ramp(16, 16, 1);
        let b1 = add_gaussian_noise(&a, 0.05, 7).unwrap();
        let b2 = add_gaussian_noise(&a, 0.05, 7).unwrap();
        assert_eq!(b1.data(), b2.data());
        let b3 = add_gaussian_noise(&a, 0.05, 8).unwrap();
        assert_ne!(b1.data(), b3.data());
    }

    #[test]
    fn noise_sample_std_matches_nu() {
        let a = Image::zeros(64, 64, 1).unwrap();
        let b = add_gaussian_noise(&a, 0.1, 123).unwrap();
        let n = b.len() as f64;
        let mean: f64 = b.data().iter().sum::<f64>() / n;
        let var: f64 = b.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
        let std = var.sqrt();
        assert!(
            (std - 0.1).abs() < 0.01,
            "sample std {std} not within 10% of 0.1"
        );
    }

    #[test]
    fn noise_rejects_negative_nu() {
        let a = ramp(4, 4, 1);
        assert!(add_gaussian_noise(&a, -0.1, 0).is_err());
    }

    #[test]
    fn from_vec_rejects_bad_length_and_nonfinite() {
        assert!(Image::from_vec(2, 2, 1, vec![0.0; 3]).is_err());
        assert!(Image::from_vec(2, 2, 1, vec![0.0, 1.0, f64::NAN, 0.5]).is_err());
        assert!(Image::from_vec(2, 2, 2, vec![0.0; 8]).is_err());
        assert!(Image::from_vec(0, 2, 1, vec![]).is_err());
    }
}
