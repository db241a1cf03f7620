//! Trainable network prior.
//!
//! The energy is g_σ(x) = ½‖x − N_σ(x)‖² for a small convolutional network
//! N_σ with circular padding and ELU activations (differentiable
//! everywhere, never ReLU), conditioned on the noise level by appending σ
//! as a constant extra input channel. The exact gradient is
//! ∇g_σ(x) = (x − N_σ(x)) − J_{N_σ}(x)ᵀ(x − N_σ(x)), so the denoiser is
//! D_σ(x) = N_σ(x) + J_{N_σ}(x)ᵀ(x − N_σ(x)). The transpose-Jacobian
//! product is a hand-written reverse pass through the layers, reusing the
//! activations of a paired forward pass.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::image::Image;
use crate::prior::GradientPrior;

const GSW_MAGIC: &[u8; 4] = b"GSW1";

/// Dense multichannel plane stack used inside the network; unlike [`Image`]
/// it allows arbitrary channel counts.
#[derive(Debug, Clone)]
pub(crate) struct FeatureMap {
    pub channels: usize,
    pub width: usize,
    pub height: usize,
    pub data: Vec<f64>,
}

impl FeatureMap {
    pub fn zeros(channels: usize, width: usize, height: usize) -> Self {
        FeatureMap {
            channels,
            width,
            height,
            data: vec![0.0; channels * width * height],
        }
    }

    pub fn plane(&self, c: usize) -> &[f64] {
        let n = self.width * self.height;
        &self.data[c * n..(c + 1) * n]
    }

    pub fn plane_mut(&mut self, c: usize) -> &mut [f64] {
        let n = self.width * self.height;
        &mut self.data[c * n..(c + 1) * n]
    }

    /// Image channels followed by one constant σ plane.
    pub(crate) fn from_image_with_sigma(x: &Image, sigma: f64) -> Self {
        let n = x.width() * x.height();
        let mut data = Vec::with_capacity((x.channels() + 1) * n);
        data.extend_from_slice(x.data());
        data.extend(std::iter::repeat(sigma).take(n));
        FeatureMap {
            channels: x.channels() + 1,
            width: x.width(),
            height: x.height(),
            data,
        }
    }

    /// First `channels` planes as an image (drops the σ plane).
    pub(crate) fn leading_channels_as_image(&self, channels: usize, like: &Image) -> Image {
        let n = self.width * self.height;
        like.with_data(self.data[..channels * n].to_vec())
    }

    pub(crate) fn from_image(x: &Image) -> Self {
        FeatureMap {
            channels: x.channels(),
            width: x.width(),
            height: x.height(),
            data: x.data().to_vec(),
        }
    }
}

pub(crate) fn elu(t: f64) -> f64 {
    if t >= 0.0 {
        t
    } else {
        t.exp() - 1.0
    }
}

pub(crate) fn elu_prime(t: f64) -> f64 {
    if t >= 0.0 {
        1.0
    } else {
        t.exp()
    }
}

/// Second derivative of ELU; zero on the nonnegative branch.
pub(crate) fn elu_second(t: f64) -> f64 {
    if t >= 0.0 {
        0.0
    } else {
        t.exp()
    }
}

/// 2D convolution layer with circular padding; the anchor is the center tap
/// (floor division for even supports).
#[derive(Debug, Clone)]
pub struct ConvLayer {
    in_channels: usize,
    out_channels: usize,
    kernel_h: usize,
    kernel_w: usize,
    weights: Vec<f64>,
    bias: Vec<f64>,
}

impl ConvLayer {
    pub fn new(
        in_channels: usize,
        out_channels: usize,
        kernel_h: usize,
        kernel_w: usize,
        weights: Vec<f64>,
        bias: Vec<f64>,
    ) -> Result<Self> {
        let expected = in_channels * out_channels * kernel_h * kernel_w;
        if weights.len() != expected || bias.len() != out_channels {
            return Err(Error::InvalidParameter(format!(
                "conv layer parameter sizes: weights {} (expected {expected}), bias {} (expected {out_channels})",
                weights.len(),
                bias.len()
            )));
        }
        if in_channels == 0 || out_channels == 0 || kernel_h == 0 || kernel_w == 0 {
            return Err(Error::InvalidParameter("conv layer sizes must be positive".into()));
        }
        Ok(ConvLayer {
            in_channels,
            out_channels,
            kernel_h,
            kernel_w,
            weights,
            bias,
        })
    }

    pub fn in_channels(&self) -> usize {
        self.in_channels
    }

    pub fn out_channels(&self) -> usize {
        self.out_channels
    }

    pub fn kernel_size(&self) -> (usize, usize) {
        (self.kernel_h, self.kernel_w)
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn bias(&self) -> &[f64] {
        &self.bias
    }

    pub(crate) fn weights_mut(&mut self) -> &mut [f64] {
        &mut self.weights
    }

    pub(crate) fn bias_mut(&mut self) -> &mut [f64] {
        &mut self.bias
    }

    fn widx(&self, o: usize, i: usize, r: usize, c: usize) -> usize {
        ((o * self.in_channels + i) * self.kernel_h + r) * self.kernel_w + c
    }

    /// Tap offset (r,c) relative to the anchor, wrapped to [0,h)×[0,w).
    fn tap_offset(&self, r: usize, c: usize, width: usize, height: usize) -> (usize, usize) {
        let dy = (r as isize - (self.kernel_h / 2) as isize).rem_euclid(height as isize);
        let dx = (c as isize - (self.kernel_w / 2) as isize).rem_euclid(width as isize);
        (dy as usize, dx as usize)
    }

    /// out[o](p) = b[o] + Σ_i Σ_k W[o,i,k] · in[i](p ⊕ δ_k).
    pub(crate) fn forward_map(&self, input: &FeatureMap) -> FeatureMap {
        let mut out = self.forward_linear(input);
        for o in 0..self.out_channels {
            let b = self.bias[o];
            for v in out.plane_mut(o) {
                *v += b;
            }
        }
        out
    }

    /// The linear part of [`ConvLayer::forward_map`] (no bias); also the
    /// adjoint of [`ConvLayer::input_adjoint`].
    ///
    /// The plane shifted by the tap offset is materialized once per
    /// (input channel, tap), turning the hot loops into contiguous
    /// whole-plane axpy/dot operations.
    pub(crate) fn forward_linear(&self, input: &FeatureMap) -> FeatureMap {
        assert_eq!(input.channels, self.in_channels, "conv input channels");
        let (w, h) = (input.width, input.height);
        let mut out = FeatureMap::zeros(self.out_channels, w, h);
        let mut shifted = vec![0.0; w * h];
        for i in 0..self.in_channels {
            let src = input.plane(i);
            for r in 0..self.kernel_h {
                for c in 0..self.kernel_w {
                    let (dy, dx) = self.tap_offset(r, c, w, h);
                    shift_plane_into(&mut shifted, src, w, h, dy, dx);
                    for o in 0..self.out_channels {
                        let wgt = self.weights[self.widx(o, i, r, c)];
                        if wgt != 0.0 {
                            axpy(out.plane_mut(o), wgt, &shifted);
                        }
                    }
                }
            }
        }
        out
    }

    /// Adjoint w.r.t. the input: vin[i](q) = Σ_o Σ_k W[o,i,k] · u[o](q ⊖ δ_k).
    pub(crate) fn input_adjoint(&self, upstream: &FeatureMap) -> FeatureMap {
        assert_eq!(upstream.channels, self.out_channels, "conv adjoint channels");
        let (w, h) = (upstream.width, upstream.height);
        let mut out = FeatureMap::zeros(self.in_channels, w, h);
        let mut shifted = vec![0.0; w * h];
        for o in 0..self.out_channels {
            let src = upstream.plane(o);
            for r in 0..self.kernel_h {
                for c in 0..self.kernel_w {
                    let (dy, dx) = self.tap_offset(r, c, w, h);
                    // Gathering at q ⊖ δ is shifting by the negated offset.
                    let (ny, nx) = ((h - dy) % h, (w - dx) % w);
                    shift_plane_into(&mut shifted, src, w, h, ny, nx);
                    for i in 0..self.in_channels {
                        let wgt = self.weights[self.widx(o, i, r, c)];
                        if wgt != 0.0 {
                            axpy(out.plane_mut(i), wgt, &shifted);
                        }
                    }
                }
            }
        }
        out
    }

    /// Parameter cotangents of the forward map:
    /// dW[o,i,k] = Σ_p u[o](p)·a[i](p ⊕ δ_k). The same contraction also
    /// yields the weight cotangent of [`ConvLayer::input_adjoint`] when
    /// called with (out-side, in-side) cotangent/primal pairs.
    pub(crate) fn weight_gradient(&self, out_side: &FeatureMap, in_side: &FeatureMap) -> Vec<f64> {
        assert_eq!(out_side.channels, self.out_channels);
        assert_eq!(in_side.channels, self.in_channels);
        let (w, h) = (out_side.width, out_side.height);
        let mut grad = vec![0.0; self.weights.len()];
        let mut shifted = vec![0.0; w * h];
        for i in 0..self.in_channels {
            let a = in_side.plane(i);
            for r in 0..self.kernel_h {
                for c in 0..self.kernel_w {
                    let (dy, dx) = self.tap_offset(r, c, w, h);
                    shift_plane_into(&mut shifted, a, w, h, dy, dx);
                    for o in 0..self.out_channels {
                        grad[self.widx(o, i, r, c)] = dot(out_side.plane(o), &shifted);
                    }
                }
            }
        }
        grad
    }

    pub(crate) fn bias_gradient(&self, upstream: &FeatureMap) -> Vec<f64> {
        (0..self.out_channels)
            .map(|o| upstream.plane(o).iter().sum())
            .collect()
    }
}

/// dst(y,x) = src((y+dy) mod h, (x+dx) mod w); each row is two memcpys.
fn shift_plane_into(dst: &mut [f64], src: &[f64], w: usize, h: usize, dy: usize, dx: usize) {
    for y in 0..h {
        let sy = (y + dy) % h;
        let srow = &src[sy * w..(sy + 1) * w];
        let drow = &mut dst[y * w..(y + 1) * w];
        if dx == 0 {
            drow.copy_from_slice(srow);
        } else {
            drow[..w - dx].copy_from_slice(&srow[dx..]);
            drow[w - dx..].copy_from_slice(&srow[..dx]);
        }
    }
}

fn axpy(dst: &mut [f64], a: f64, x: &[f64]) {
    for (d, s) in dst.iter_mut().zip(x) {
        *d += a * s;
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Activations retained by a forward pass; `pre[l]` is the layer output
/// before the nonlinearity, `post[l]` the layer input.
pub(crate) struct ForwardCache {
    pub post: Vec<FeatureMap>,
    pub pre: Vec<FeatureMap>,
}

impl ForwardCache {
    pub fn output(&self) -> &FeatureMap {
        self.pre.last().expect("network has layers")
    }
}

/// Intermediates of a transpose-Jacobian product, retained so training can
/// run reverse-mode through the VJP itself.
pub(crate) struct VjpCache {
    /// Gated cotangent fed to each layer adjoint (s_l).
    pub gated: Vec<FeatureMap>,
    /// Incoming cotangent at each gate (w_{l+1}), before gating.
    pub incoming: Vec<FeatureMap>,
    /// Cotangent at the network input, σ channel included (w_0).
    pub input_cotangent: FeatureMap,
}

/// Small sequential convolutional network with ELU between layers and a
/// linear last layer.
#[derive(Debug, Clone)]
pub struct GsNetwork {
    layers: Vec<ConvLayer>,
}

impl GsNetwork {
    pub fn new(layers: Vec<ConvLayer>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::InvalidParameter("network needs at least one layer".into()));
        }
        for pair in layers.windows(2) {
            if pair[0].out_channels != pair[1].in_channels {
                return Err(Error::dims(
                    "GsNetwork::new",
                    pair[0].out_channels,
                    pair[1].in_channels,
                ));
            }
        }
        Ok(GsNetwork { layers })
    }

    /// Desk-scale default: 4 convolution layers, 3×3 taps, 16 hidden
    /// channels, one extra input channel carrying σ. Weights drawn from a
    /// fan-in-scaled normal, biases zero; fully determined by the seed.
    pub fn desk_default(image_channels: usize, seed: u64) -> Self {
        Self::random(image_channels, 16, 4, 3, seed)
    }

    pub fn random(
        image_channels: usize,
        hidden_channels: usize,
        layer_count: usize,
        kernel_size: usize,
        seed: u64,
    ) -> Self {
        assert!(layer_count >= 1);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut layers = Vec::with_capacity(layer_count);
        for l in 0..layer_count {
            let in_ch = if l == 0 { image_channels + 1 } else { hidden_channels };
            let out_ch = if l == layer_count - 1 { image_channels } else { hidden_channels };
            let fan_in = (in_ch * kernel_size * kernel_size) as f64;
            let scale = (2.0 / fan_in).sqrt();
            let weights = (0..in_ch * out_ch * kernel_size * kernel_size)
                .map(|_| scale * rng.sample::<f64, _>(rand_distr::StandardNormal))
                .collect();
            layers.push(
                ConvLayer::new(in_ch, out_ch, kernel_size, kernel_size, weights, vec![0.0; out_ch])
                    .expect("sizes are consistent"),
            );
        }
        GsNetwork { layers }
    }

    pub fn layers(&self) -> &[ConvLayer] {
        &self.layers
    }

    pub(crate) fn layers_mut(&mut self) -> &mut [ConvLayer] {
        &mut self.layers
    }

    pub fn parameter_count(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.weights.len() + l.bias.len())
            .sum()
    }

    fn check_image(&self, x: &Image) -> Result<()> {
        let first = &self.layers[0];
        let last = self.layers.last().unwrap();
        if first.in_channels != x.channels() + 1 || last.out_channels != x.channels() {
            return Err(Error::dims(
                "GsNetwork::forward",
                format!("{}->{} channels", first.in_channels, last.out_channels),
                format!("{}+sigma->{} image", x.channels(), x.channels()),
            ));
        }
        Ok(())
    }

    pub(crate) fn forward_cached(&self, x: &Image, sigma: f64) -> Result<ForwardCache> {
        self.check_image(x)?;
        let layer_count = self.layers.len();
        let mut post = Vec::with_capacity(layer_count);
        let mut pre = Vec::with_capacity(layer_count);
        let mut current = FeatureMap::from_image_with_sigma(x, sigma);
        for (l, layer) in self.layers.iter().enumerate() {
            let z = layer.forward_map(&current);
            let next = if l + 1 < layer_count {
                let mut a = z.clone();
                for v in &mut a.data {
                    *v = elu(*v);
                }
                a
            } else {
                z.clone()
            };
            post.push(current);
            pre.push(z);
            current = next;
        }
        Ok(ForwardCache { post, pre })
    }

    /// N_σ(x).
    pub fn forward(&self, x: &Image, sigma: f64) -> Result<Image> {
        let cache = self.forward_cached(x, sigma)?;
        Ok(cache.output().leading_channels_as_image(x.channels(), x))
    }

    /// Reverse sweep computing w_0 = J_{N_σ}(x)ᵀu in the input cotangent
    /// space (σ channel included); gating by ELU′ of the cached
    /// pre-activations, then each layer's input adjoint.
    pub(crate) fn vjp_cached(&self, cache: &ForwardCache, u: &FeatureMap) -> VjpCache {
        let layer_count = self.layers.len();
        let mut gated = vec![FeatureMap::zeros(1, 1, 1); layer_count];
        let mut incoming = vec![FeatureMap::zeros(1, 1, 1); layer_count];
        let mut w = u.clone();
        for l in (0..layer_count).rev() {
            incoming[l] = w.clone();
            let s = if l + 1 < layer_count {
                let mut s = w.clone();
                for (sv, zv) in s.data.iter_mut().zip(&cache.pre[l].data) {
                    *sv *= elu_prime(*zv);
                }
                s
            } else {
                w.clone()
            };
            w = self.layers[l].input_adjoint(&s);
            gated[l] = s;
        }
        VjpCache {
            gated,
            incoming,
            input_cotangent: w,
        }
    }

    /// Exact transpose-Jacobian product J_{N_σ}(x)ᵀu.
    pub fn vjp(&self, x: &Image, sigma: f64, u: &Image) -> Result<Image> {
        self.check_image(x)?;
        if !x.same_shape(u) {
            return Err(Error::dims("GsNetwork::vjp", x.shape_string(), u.shape_string()));
        }
        let cache = self.forward_cached(x, sigma)?;
        let vjp = self.vjp_cached(&cache, &FeatureMap::from_image(u));
        Ok(vjp
            .input_cotangent
            .leading_channels_as_image(x.channels(), x))
    }

    /// Binary container: magic `GSW1`, layer count, then per layer
    /// (in, out, kh, kw as little-endian u32, then weights and bias as
    /// little-endian f64).
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        w.write_all(GSW_MAGIC)?;
        w.write_all(&(self.layers.len() as u32).to_le_bytes())?;
        for layer in &self.layers {
            for v in [
                layer.in_channels,
                layer.out_channels,
                layer.kernel_h,
                layer.kernel_w,
            ] {
                w.write_all(&(v as u32).to_le_bytes())?;
            }
            for &value in layer.weights.iter().chain(&layer.bias) {
                w.write_all(&value.to_le_bytes())?;
            }
        }
        w.flush()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let mut r = BufReader::new(File::open(path)?);
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)
            .map_err(|_| Error::malformed(path, "truncated magic"))?;
        if &magic != GSW_MAGIC {
            return Err(Error::malformed(path, "bad GSW magic"));
        }
        let read_u32 = |r: &mut BufReader<File>| -> Result<u32> {
            let mut b = [0u8; 4];
            r.read_exact(&mut b)
                .map_err(|_| Error::malformed(path, "truncated header"))?;
            Ok(u32::from_le_bytes(b))
        };
        let count = read_u32(&mut r)? as usize;
        if count == 0 || count > 1024 {
            return Err(Error::malformed(path, format!("implausible layer count {count}")));
        }
        let mut layers = Vec::with_capacity(count);
        for _ in 0..count {
            let in_ch = read_u32(&mut r)? as usize;
            let out_ch = read_u32(&mut r)? as usize;
            let kh = read_u32(&mut r)? as usize;
            let kw = read_u32(&mut r)? as usize;
            let n = in_ch
                .checked_mul(out_ch)
                .and_then(|v| v.checked_mul(kh))
                .and_then(|v| v.checked_mul(kw))
                .ok_or_else(|| Error::malformed(path, "layer size overflow"))?;
            let mut bytes = vec![0u8; (n + out_ch) * 8];
            r.read_exact(&mut bytes)
                .map_err(|_| Error::malformed(path, "truncated parameters"))?;
            let values: Vec<f64> = bytes
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            layers.push(ConvLayer::new(
                in_ch,
                out_ch,
                kh,
                kw,
                values[..n].to_vec(),
                values[n..].to_vec(),
            )?);
        }
        GsNetwork::new(layers)
    }
}

/// The trainable [`GradientPrior`]: g_σ(x) = ½‖x − N_σ(x)‖².
#[derive(Debug, Clone)]
pub struct NetworkPrior {
    network: GsNetwork,
    sigma: f64,
}

impl NetworkPrior {
    pub fn new(network: GsNetwork, sigma: f64) -> Result<Self> {
        if !(sigma >= 0.0) || !sigma.is_finite() {
            return Err(Error::InvalidParameter(format!(
                "noise level must be finite and nonnegative, got {sigma}"
            )));
        }
        Ok(NetworkPrior { network, sigma })
    }

    pub fn network(&self) -> &GsNetwork {
        &self.network
    }
}

impl GradientPrior for NetworkPrior {
    fn sigma(&self) -> f64 {
        self.sigma
    }

    fn energy(&self, x: &Image) -> Result<f64> {
        let n = self.network.forward(x, self.sigma)?;
        Ok(0.5 * x.sub(&n).norm_sq())
    }

    /// ∇g_σ(x) = r − J_{N_σ}(x)ᵀr with r = x − N_σ(x); one forward pass
    /// shared by the residual and the reverse sweep.
    fn grad(&self, x: &Image) -> Result<Image> {
        self.network.check_image(x)?;
        let cache = self.network.forward_cached(x, self.sigma)?;
        let n = cache.output().leading_channels_as_image(x.channels(), x);
        let residual = x.sub(&n);
        let vjp = self
            .network
            .vjp_cached(&cache, &FeatureMap::from_image(&residual));
        let jt_r = vjp
            .input_cotangent
            .leading_channels_as_image(x.channels(), x);
        Ok(residual.sub(&jt_r))
    }
}
