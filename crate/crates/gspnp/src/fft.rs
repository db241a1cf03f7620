//! 2D FFT helpers on row-major complex buffers.
//!
//! Convention used throughout the crate: the forward transform is
//! unnormalized, the inverse divides by width×height, so inverse∘forward is
//! the identity. Plans are cached behind a mutex; processing happens outside
//! the lock, so concurrent transforms do not serialize.

use std::sync::{Arc, LazyLock, Mutex};

use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};

static PLANNER: LazyLock<Mutex<FftPlanner<f64>>> =
    LazyLock::new(|| Mutex::new(FftPlanner::new()));

fn plan(len: usize, forward: bool) -> Arc<dyn Fft<f64>> {
    let mut planner = PLANNER.lock().expect("fft planner poisoned");
    if forward {
        planner.plan_fft_forward(len)
    } else {
        planner.plan_fft_inverse(len)
    }
}

fn transform_2d(buf: &mut [Complex<f64>], width: usize, height: usize, forward: bool) {
    assert_eq!(buf.len(), width * height);
    let row_fft = plan(width, forward);
    let mut scratch = vec![Complex::default(); row_fft.get_inplace_scratch_len()];
    for row in buf.chunks_exact_mut(width) {
        row_fft.process_with_scratch(row, &mut scratch);
    }

    // Columns via transpose, row FFTs, transpose back.
    let col_fft = plan(height, forward);
    let mut transposed = vec![Complex::default(); buf.len()];
    for y in 0..height {
        for x in 0..width {
            transposed[x * height + y] = buf[y * width + x];
        }
    }
    scratch.resize(col_fft.get_inplace_scratch_len(), Complex::default());
    for col in transposed.chunks_exact_mut(height) {
        col_fft.process_with_scratch(col, &mut scratch);
    }
    for x in 0..width {
        for y in 0..height {
            buf[y * width + x] = transposed[x * height + y];
        }
    }
}

pub(crate) fn forward(buf: &mut [Complex<f64>], width: usize, height: usize) {
    transform_2d(buf, width, height, true);
}

pub(crate) fn inverse(buf: &mut [Complex<f64>], width: usize, height: usize) {
    transform_2d(buf, width, height, false);
    let scale = 1.0 / (width * height) as f64;
    for v in buf.iter_mut() {
        *v *= scale;
    }
}

/// Real plane → complex buffer.
pub(crate) fn to_complex(plane: &[f64]) -> Vec<Complex<f64>> {
    plane.iter().map(|&v| Complex::new(v, 0.0)).collect()
}

/// Real parts of a complex buffer (imaginary parts are roundoff when the
/// spectrum is conjugate-symmetric).
pub(crate) fn to_real(buf: &[Complex<f64>]) -> Vec<f64> {
    buf.iter().map(|c| c.re).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn forward_inverse_round_trip() {
        let width = 6;
        let height = 4;
        let original: Vec<Complex<f64>> = (0..width * height)
            .map(|i| Complex::new((i as f64).sin(), (i as f64 * 0.3).cos()))
            .collect();
        let mut buf = original.clone();
        forward(&mut buf, width, height);
        inverse(&mut buf, width, height);
        for (a, b) in buf.iter().zip(&original) {
            assert!((a - b).norm() < 1e-12);
        }
    }

    #[test]
    fn forward_matches_direct_dft() {
        let width = 3;
        let height = 5;
        let data: Vec<Complex<f64>> = (0..width * height)
            .map(|i| Complex::new(0.1 * i as f64, 0.0))
            .collect();
        let mut buf = data.clone();
        forward(&mut buf, width, height);
        for v in 0..height {
            for u in 0..width {
                let mut acc = Complex::new(0.0, 0.0);
                for y in 0..height {
                    for x in 0..width {
                        let phase = -2.0
                            * std::f64::consts::PI
                            * (u as f64 * x as f64 / width as f64
                                + v as f64 * y as f64 / height as f64);
                        acc += data[y * width + x] * Complex::from_polar(1.0, phase);
                    }
                }
                assert!((buf[v * width + u] - acc).norm() < 1e-10);
            }
        }
    }
}
