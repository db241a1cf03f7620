//! Degradation operators (blur, decimated blur, mask), their adjoints, and
//! the closed-form FFT proximal maps of their data-fidelity terms.
//!
//! All convolutions use circular boundary conditions, so a blur `H` is
//! diagonalized by the 2D DFT: `H = F⁻¹ Λ F`. Operators act per channel.

use std::fmt;
use std::path::Path;

use rustfft::num_complex::Complex;

use crate::error::{Error, Result};
use crate::fft;
use crate::image::Image;

/// 2D convolution kernel with an explicit origin tap.
#[derive(Debug, Clone)]
pub struct BlurKernel {
    rows: usize,
    cols: usize,
    anchor_row: usize,
    anchor_col: usize,
    taps: Vec<f64>,
}

impl BlurKernel {
    /// Builds a kernel from row-major taps. The tap sum must be finite and
    /// nonzero; no normalization is applied here (see [`BlurKernel::load`]).
    pub fn new(
        rows: usize,
        cols: usize,
        anchor_row: usize,
        anchor_col: usize,
        taps: Vec<f64>,
    ) -> Result<Self> {
        if rows == 0 || cols == 0 || taps.len() != rows * cols {
            return Err(Error::InvalidParameter(format!(
                "kernel taps length {} does not match {rows}x{cols}",
                taps.len()
            )));
        }
        if anchor_row >= rows || anchor_col >= cols {
            return Err(Error::InvalidParameter(format!(
                "kernel anchor ({anchor_row},{anchor_col}) outside {rows}x{cols} support"
            )));
        }
        let sum: f64 = taps.iter().sum();
        if !sum.is_finite() || sum == 0.0 {
            return Err(Error::InvalidParameter(format!(
                "kernel tap sum must be finite and nonzero, got {sum}"
            )));
        }
        if !taps.iter().all(|t| t.is_finite()) {
            return Err(Error::NonFinite("BlurKernel::new"));
        }
        Ok(BlurKernel {
            rows,
            cols,
            anchor_row,
            anchor_col,
            taps,
        })
    }

    /// Single unit tap: the identity kernel.
    pub fn delta() -> Self {
        BlurKernel::new(1, 1, 0, 0, vec![1.0]).unwrap()
    }

    /// Rescales the taps to sum to 1 (blur kernels are photometrically
    /// neutral).
    pub fn normalized(mut self) -> Self {
        let sum: f64 = self.taps.iter().sum();
        for t in &mut self.taps {
            *t /= sum;
        }
        self
    }

    /// Loads the plain-text kernel format: first line
    /// `rows cols anchor_row anchor_col`, then rows×cols whitespace-separated
    /// floats. The taps are normalized to sum 1.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)?;
        let mut tokens = text.split_whitespace();
        let mut next_usize = |name: &str| -> Result<usize> {
            tokens
                .next()
                .ok_or_else(|| Error::malformed(path, format!("missing {name}")))?
                .parse()
                .map_err(|_| Error::malformed(path, format!("bad {name}")))
        };
        let rows = next_usize("rows")?;
        let cols = next_usize("cols")?;
        let anchor_row = next_usize("anchor_row")?;
        let anchor_col = next_usize("anchor_col")?;
        let taps: Vec<f64> = tokens
            .map(|t| {
                t.parse::<f64>()
                    .map_err(|_| Error::malformed(path, format!("bad tap {t:?}")))
            })
            .collect::<Result<_>>()?;
        if taps.len() != rows * cols {
            return Err(Error::malformed(
                path,
                format!("expected {} taps, found {}", rows * cols, taps.len()),
            ));
        }
        Ok(BlurKernel::new(rows, cols, anchor_row, anchor_col, taps)?.normalized())
    }

    /// Writes the plain-text kernel format read by [`BlurKernel::load`].
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut out = format!(
            "{} {} {} {}\n",
            self.rows, self.cols, self.anchor_row, self.anchor_col
        );
        for r in 0..self.rows {
            let row: Vec<String> = (0..self.cols)
                .map(|c| format!("{:.17e}", self.taps[r * self.cols + c]))
                .collect();
            out.push_str(&row.join(" "));
            out.push('\n');
        }
        std::fs::write(path, out)?;
        Ok(())
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn taps(&self) -> &[f64] {
        &self.taps
    }

    fn fits(&self, width: usize, height: usize) -> Result<()> {
        if self.rows > height || self.cols > width {
            return Err(Error::KernelTooLarge {
                krows: self.rows,
                kcols: self.cols,
                width,
                height,
            });
        }
        Ok(())
    }

    /// Embeds the kernel on a width×height grid with the anchor at (0,0),
    /// wrapping negative offsets circularly.
    fn embed(&self, width: usize, height: usize) -> Vec<f64> {
        let mut grid = vec![0.0; width * height];
        for r in 0..self.rows {
            for c in 0..self.cols {
                let dy = r as isize - self.anchor_row as isize;
                let dx = c as isize - self.anchor_col as isize;
                let y = dy.rem_euclid(height as isize) as usize;
                let x = dx.rem_euclid(width as isize) as usize;
                grid[y * width + x] += self.taps[r * self.cols + c];
            }
        }
        grid
    }
}

/// Eigenvalues of a circular convolution in the DFT basis, for one grid.
#[derive(Clone)]
pub struct FourierDiagonal {
    width: usize,
    height: usize,
    values: Vec<Complex<f64>>,
}

impl fmt::Debug for FourierDiagonal {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("FourierDiagonal")
            .field("width", &self.width)
            .field("height", &self.height)
            .finish()
    }
}

impl FourierDiagonal {
    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn values(&self) -> &[Complex<f64>] {
        &self.values
    }

    fn check_grid(&self, image: &Image, context: &'static str) -> Result<()> {
        if image.width() != self.width || image.height() != self.height {
            return Err(Error::dims(
                context,
                format!("{}x{}", self.width, self.height),
                image.shape_string(),
            ));
        }
        Ok(())
    }

    /// Applies `H` (multiply the spectrum by Λ), per channel.
    pub fn apply(&self, x: &Image) -> Result<Image> {
        self.apply_spectral(x, |lam| lam)
    }

    /// Applies `Hᵀ` (multiply the spectrum by conj Λ), per channel.
    pub fn apply_adjoint(&self, x: &Image) -> Result<Image> {
        self.apply_spectral(x, |lam| lam.conj())
    }

    fn apply_spectral(&self, x: &Image, f: impl Fn(Complex<f64>) -> Complex<f64>) -> Result<Image> {
        self.check_grid(x, "FourierDiagonal::apply")?;
        let mut out = Vec::with_capacity(x.len());
        for c in 0..x.channels() {
            let mut buf = fft::to_complex(x.plane(c));
            fft::forward(&mut buf, self.width, self.height);
            for (v, lam) in buf.iter_mut().zip(&self.values) {
                *v *= f(*lam);
            }
            fft::inverse(&mut buf, self.width, self.height);
            out.extend(fft::to_real(&buf));
        }
        Ok(x.with_data(out))
    }
}

/// DFT eigenvalues Λ of the circular convolution by `kernel` on a
/// width×height grid, so that `Hx = F⁻¹(Λ · Fx)`.
pub fn build_fourier_diagonal(
    kernel: &BlurKernel,
    width: usize,
    height: usize,
) -> Result<FourierDiagonal> {
    kernel.fits(width, height)?;
    let mut buf = fft::to_complex(&kernel.embed(width, height));
    fft::forward(&mut buf, width, height);
    Ok(FourierDiagonal {
        width,
        height,
        values: buf,
    })
}

/// Circular convolution `Hx` computed via the FFT diagonalization.
pub fn circular_convolve(x: &Image, kernel: &BlurKernel) -> Result<Image> {
    let diagonal = build_fourier_diagonal(kernel, x.width(), x.height())?;
    diagonal.apply(x)
}

/// Closed-form proximal map of `(τ/2)‖Hx−y‖²` at z:
/// `F⁻¹(I + τΛ*Λ)⁻¹F(τHᵀy + z)`, evaluated per channel with element-wise
/// inversion (the denominator 1 + τ|Λ|² never vanishes).
pub fn prox_deblur(
    z: &Image,
    y: &Image,
    tau: f64,
    diagonal: &FourierDiagonal,
) -> Result<Image> {
    if !(tau >= 0.0) {
        return Err(Error::InvalidParameter(format!(
            "prox stepsize must be nonnegative, got {tau}"
        )));
    }
    if !z.same_shape(y) {
        return Err(Error::dims("prox_deblur", z.shape_string(), y.shape_string()));
    }
    diagonal.check_grid(z, "prox_deblur")?;
    if tau == 0.0 {
        return Ok(z.clone());
    }
    let (w, h) = (diagonal.width, diagonal.height);
    let mut out = Vec::with_capacity(z.len());
    for c in 0..z.channels() {
        let mut zf = fft::to_complex(z.plane(c));
        fft::forward(&mut zf, w, h);
        let mut yf = fft::to_complex(y.plane(c));
        fft::forward(&mut yf, w, h);
        for ((zv, yv), lam) in zf.iter_mut().zip(&yf).zip(&diagonal.values) {
            let denom = 1.0 + tau * lam.norm_sqr();
            *zv = (*zv + lam.conj() * tau * yv) / denom;
        }
        fft::inverse(&mut zf, w, h);
        out.extend(fft::to_real(&zf));
    }
    Ok(z.with_data(out))
}

/// Keeps every s-th sample starting at (0,0). Dimensions must divide by s.
pub fn decimate(x: &Image, scale: usize) -> Result<Image> {
    if scale == 0 {
        return Err(Error::InvalidParameter("decimation scale must be >= 1".into()));
    }
    if x.width() % scale != 0 || x.height() % scale != 0 {
        return Err(Error::dims(
            "decimate",
            x.shape_string(),
            format!("divisible by {scale}"),
        ));
    }
    if scale == 1 {
        return Ok(x.clone());
    }
    let (lw, lh) = (x.width() / scale, x.height() / scale);
    let mut out = Vec::with_capacity(lw * lh * x.channels());
    for c in 0..x.channels() {
        let plane = x.plane(c);
        for y in 0..lh {
            for xx in 0..lw {
                out.push(plane[(y * scale) * x.width() + xx * scale]);
            }
        }
    }
    Image::from_vec(lw, lh, x.channels(), out)
}

/// Adjoint of [`decimate`]: zero-fills the complementary positions.
pub fn decimate_adjoint(y: &Image, scale: usize) -> Result<Image> {
    if scale == 0 {
        return Err(Error::InvalidParameter("decimation scale must be >= 1".into()));
    }
    if scale == 1 {
        return Ok(y.clone());
    }
    let (hw, hh) = (y.width() * scale, y.height() * scale);
    let mut out = vec![0.0; hw * hh * y.channels()];
    for c in 0..y.channels() {
        let plane = y.plane(c);
        let base = c * hw * hh;
        for yy in 0..y.height() {
            for xx in 0..y.width() {
                out[base + (yy * scale) * hw + xx * scale] = plane[yy * y.width() + xx];
            }
        }
    }
    Image::from_vec(hw, hh, y.channels(), out)
}

/// Closed-form proximal map of `(τ/2)‖SHx−y‖²` at z, the exact minimizer of
/// `½‖x−z‖² + (τ/2)‖SHx−y‖²`.
///
/// With ẑ = τHᵀSᵀy + z the solution is
/// `ẑ − (τ/s²)·F⁻¹ Λ̄*(I_m + (τ/s²) Λ̄Λ̄*)⁻¹ Λ̄ F ẑ`, where Λ̄ stacks the s×s
/// Fourier paving blocks of Λ (frequencies congruent modulo the low-res
/// grid). Λ̄Λ̄* is diagonal, so the m×m inverse is element-wise per low-res
/// frequency; nothing is materialized beyond spectra.
pub fn prox_sr(
    z: &Image,
    y: &Image,
    tau: f64,
    diagonal: &FourierDiagonal,
    scale: usize,
) -> Result<Image> {
    if scale == 0 {
        return Err(Error::InvalidParameter("SR scale must be >= 1".into()));
    }
    if scale == 1 {
        return prox_deblur(z, y, tau, diagonal);
    }
    if !(tau >= 0.0) {
        return Err(Error::InvalidParameter(format!(
            "prox stepsize must be nonnegative, got {tau}"
        )));
    }
    diagonal.check_grid(z, "prox_sr")?;
    let (w, h) = (diagonal.width, diagonal.height);
    if w % scale != 0 || h % scale != 0 {
        return Err(Error::dims(
            "prox_sr",
            format!("{w}x{h}"),
            format!("divisible by {scale}"),
        ));
    }
    let (lw, lh) = (w / scale, h / scale);
    if y.width() != lw || y.height() != lh || y.channels() != z.channels() {
        return Err(Error::dims(
            "prox_sr",
            format!("{lw}x{lh}x{}", z.channels()),
            y.shape_string(),
        ));
    }
    if tau == 0.0 {
        return Ok(z.clone());
    }

    let sty = decimate_adjoint(y, scale)?;
    let hty = diagonal.apply_adjoint(&sty)?;
    let zhat = z.add_scaled(&hty, tau);

    let s2 = (scale * scale) as f64;
    let mut out = Vec::with_capacity(z.len());
    for c in 0..z.channels() {
        let mut zf = fft::to_complex(zhat.plane(c));
        fft::forward(&mut zf, w, h);
        let mut correction = vec![Complex::new(0.0, 0.0); w * h];
        for p in 0..lh {
            for q in 0..lw {
                let mut num = Complex::new(0.0, 0.0);
                let mut gram = 0.0;
                for j in 0..scale {
                    for i in 0..scale {
                        let idx = (p + j * lh) * w + (q + i * lw);
                        let lam = diagonal.values[idx];
                        num += lam * zf[idx];
                        gram += lam.norm_sqr();
                    }
                }
                let v = num / (1.0 + tau / s2 * gram);
                for j in 0..scale {
                    for i in 0..scale {
                        let idx = (p + j * lh) * w + (q + i * lw);
                        correction[idx] = diagonal.values[idx].conj() * v;
                    }
                }
            }
        }
        fft::inverse(&mut correction, w, h);
        let spatial = fft::to_real(&correction);
        out.extend(
            zhat.plane(c)
                .iter()
                .zip(&spatial)
                .map(|(&a, &b)| a - tau / s2 * b),
        );
    }
    Ok(z.with_data(out))
}

/// Proximal map of the indicator of `{x : Ax = y}`: the orthogonal
/// projection `Ay − Az + z` (observed pixels reset to y, unobserved pass
/// through). The mask is binary; a single-channel mask broadcasts.
pub fn prox_inpaint(z: &Image, y: &Image, mask: &Image) -> Result<Image> {
    check_binary(mask)?;
    if !z.same_shape(y) {
        return Err(Error::dims("prox_inpaint", z.shape_string(), y.shape_string()));
    }
    check_mask_grid(mask, z, "prox_inpaint")?;
    Ok(mask_select(mask, y, z))
}

fn check_binary(mask: &Image) -> Result<()> {
    for (i, &v) in mask.data().iter().enumerate() {
        if v != 0.0 && v != 1.0 {
            return Err(Error::NonBinaryMask { index: i, value: v });
        }
    }
    Ok(())
}

fn check_mask_grid(mask: &Image, x: &Image, context: &'static str) -> Result<()> {
    let grid_ok = mask.width() == x.width() && mask.height() == x.height();
    let ch_ok = mask.channels() == 1 || mask.channels() == x.channels();
    if !grid_ok || !ch_ok {
        return Err(Error::dims(context, mask.shape_string(), x.shape_string()));
    }
    Ok(())
}

fn mask_value(mask: &Image, c: usize, index: usize) -> f64 {
    let mc = if mask.channels() == 1 { 0 } else { c };
    mask.plane(mc)[index]
}

/// mask ⊙ a + (1 − mask) ⊙ b, with channel broadcast for the mask.
fn mask_select(mask: &Image, a: &Image, b: &Image) -> Image {
    let plane = a.width() * a.height();
    let mut out = Vec::with_capacity(a.len());
    for c in 0..a.channels() {
        let (pa, pb) = (a.plane(c), b.plane(c));
        for i in 0..plane {
            out.push(if mask_value(mask, c, i) == 1.0 { pa[i] } else { pb[i] });
        }
    }
    a.with_data(out)
}

fn mask_apply(mask: &Image, x: &Image) -> Image {
    let plane = x.width() * x.height();
    let mut out = Vec::with_capacity(x.len());
    for c in 0..x.channels() {
        let px = x.plane(c);
        for i in 0..plane {
            out.push(mask_value(mask, c, i) * px[i]);
        }
    }
    x.with_data(out)
}

/// A degradation `y = Ax (+ noise)` together with its precomputed spectral
/// data. Immutable after construction; application is pure.
#[derive(Debug, Clone)]
pub enum Degradation {
    Deblur {
        kernel: BlurKernel,
        diagonal: FourierDiagonal,
    },
    SuperResolve {
        kernel: BlurKernel,
        scale: usize,
        diagonal: FourierDiagonal,
    },
    Inpaint {
        mask: Image,
    },
}

impl Degradation {
    /// Circular blur on a width×height grid.
    pub fn deblur(kernel: BlurKernel, width: usize, height: usize) -> Result<Self> {
        let diagonal = build_fourier_diagonal(&kernel, width, height)?;
        Ok(Degradation::Deblur { kernel, diagonal })
    }

    /// Blur followed by s-fold decimation; width and height are the
    /// high-resolution grid and must divide by the scale.
    pub fn super_resolve(
        kernel: BlurKernel,
        scale: usize,
        width: usize,
        height: usize,
    ) -> Result<Self> {
        if scale == 0 {
            return Err(Error::InvalidParameter("SR scale must be >= 1".into()));
        }
        if width % scale != 0 || height % scale != 0 {
            return Err(Error::dims(
                "Degradation::super_resolve",
                format!("{width}x{height}"),
                format!("divisible by {scale}"),
            ));
        }
        let diagonal = build_fourier_diagonal(&kernel, width, height)?;
        Ok(Degradation::SuperResolve {
            kernel,
            scale,
            diagonal,
        })
    }

    /// Pixel mask (1 = observed, 0 = missing).
    pub fn inpaint(mask: Image) -> Result<Self> {
        check_binary(&mask)?;
        Ok(Degradation::Inpaint { mask })
    }

    /// Applies `A`.
    pub fn forward(&self, x: &Image) -> Result<Image> {
        match self {
            Degradation::Deblur { diagonal, .. } => diagonal.apply(x),
            Degradation::SuperResolve {
                scale, diagonal, ..
            } => decimate(&diagonal.apply(x)?, *scale),
            Degradation::Inpaint { mask } => {
                check_mask_grid(mask, x, "Degradation::forward")?;
                Ok(mask_apply(mask, x))
            }
        }
    }

    /// Applies `Aᵀ`.
    pub fn adjoint(&self, y: &Image) -> Result<Image> {
        match self {
            Degradation::Deblur { diagonal, .. } => diagonal.apply_adjoint(y),
            Degradation::SuperResolve {
                scale, diagonal, ..
            } => diagonal.apply_adjoint(&decimate_adjoint(y, *scale)?),
            Degradation::Inpaint { mask } => {
                check_mask_grid(mask, y, "Degradation::adjoint")?;
                Ok(mask_apply(mask, y))
            }
        }
    }

    /// Closed-form proximal map of τ·(data fidelity) at z.
    pub fn prox(&self, z: &Image, y: &Image, tau: f64) -> Result<Image> {
        match self {
            Degradation::Deblur { diagonal, .. } => prox_deblur(z, y, tau, diagonal),
            Degradation::SuperResolve {
                scale, diagonal, ..
            } => prox_sr(z, y, tau, diagonal, *scale),
            Degradation::Inpaint { mask } => prox_inpaint(z, y, mask),
        }
    }

    /// Data-fidelity energy: `½‖Ax−y‖²` for the smooth kinds; for inpainting
    /// the indicator of `Ax = y` (0 within 1e-9 pointwise on observed
    /// pixels, +∞ otherwise; unobserved entries of y are ignored).
    pub fn data_fidelity(&self, x: &Image, y: &Image) -> Result<f64> {
        match self {
            Degradation::Inpaint { mask } => {
                check_mask_grid(mask, x, "data_fidelity")?;
                if !x.same_shape(y) {
                    return Err(Error::dims("data_fidelity", x.shape_string(), y.shape_string()));
                }
                let mx = mask_apply(mask, x);
                let my = mask_apply(mask, y);
                if mx.max_abs_diff(&my) <= 1e-9 {
                    Ok(0.0)
                } else {
                    Ok(f64::INFINITY)
                }
            }
            _ => {
                let ax = self.forward(x)?;
                if !ax.same_shape(y) {
                    return Err(Error::dims("data_fidelity", ax.shape_string(), y.shape_string()));
                }
                Ok(0.5 * ax.sub(y).norm_sq())
            }
        }
    }

    /// Gradient of the smooth data fidelity, `Aᵀ(Ax−y)`. For inpainting the
    /// fidelity is an indicator with no gradient; this returns the residual
    /// direction on observed pixels, used only by the projected stationarity
    /// diagnostic.
    pub fn fidelity_gradient(&self, x: &Image, y: &Image) -> Result<Image> {
        let ax = self.forward(x)?;
        self.adjoint(&ax.sub(y))
    }

    /// Shape of the observation grid for a width×height×channels input.
    pub fn observed_shape(&self, x: &Image) -> (usize, usize, usize) {
        match self {
            Degradation::SuperResolve { scale, .. } => (
                x.width() / scale,
                x.height() / scale,
                x.channels(),
            ),
            _ => (x.width(), x.height(), x.channels()),
        }
    }
}

/// Free-function form of [`Degradation::data_fidelity`].
pub fn data_fidelity(x: &Image, y: &Image, degradation: &Degradation) -> Result<f64> {
    degradation.data_fidelity(x, y)
}
