//! Learned trigger generator: an encoder-decoder image-to-image network
//! whose output perturbs a clean image into its backdoor counterpart.
//!
//! The generator emits a residual through `tanh` scaled by a hard cap, so
//! `|backdoor - clean|` can never exceed the cap regardless of training;
//! the mean-squared-error term then shapes the average perturbation to be
//! visually negligible. The output head starts at zero, making the
//! generator the identity mapping before training.

use ndarray::{concatenate, s, Array4, Axis};
use rand_chacha::ChaCha12Rng;

use crate::error::{Error, Result};
use crate::nn::conv::Conv2d;
use crate::nn::norm::BatchNorm2d;
use crate::nn::pool::{MaxPool2, UpsampleNearest2};
use crate::nn::{crop, pad_zeros, Param, Relu};

/// A batch of images `[N, C, H, W]` with pixel values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageBatch {
    pixels: Array4<f32>,
}

impl ImageBatch {
    pub fn new(pixels: Array4<f32>) -> Result<Self> {
        if pixels.iter().any(|v| !v.is_finite() || *v < 0.0 || *v > 1.0) {
            return Err(Error::InvalidInput(
                "image batch must contain finite values in [0, 1]".into(),
            ));
        }
        Ok(Self { pixels })
    }

    pub fn as_array(&self) -> &Array4<f32> {
        &self.pixels
    }

    pub fn into_array(self) -> Array4<f32> {
        self.pixels
    }

    pub fn dim(&self) -> (usize, usize, usize, usize) {
        self.pixels.dim()
    }
}

/// conv -> batchnorm -> relu, twice.
#[derive(Debug, Clone)]
struct DoubleConv {
    c1: Conv2d,
    b1: BatchNorm2d,
    r1: Relu,
    c2: Conv2d,
    b2: BatchNorm2d,
    r2: Relu,
}

impl DoubleConv {
    fn new(cin: usize, cout: usize, rng: &mut ChaCha12Rng) -> Self {
        Self {
            c1: Conv2d::new(cin, cout, 3, 1, 1, rng),
            b1: BatchNorm2d::new(cout),
            r1: Relu::new(),
            c2: Conv2d::new(cout, cout, 3, 1, 1, rng),
            b2: BatchNorm2d::new(cout),
            r2: Relu::new(),
        }
    }

    fn forward(&mut self, x: &Array4<f32>, train: bool) -> Array4<f32> {
        let x = self.r1.forward(&self.b1.forward(&self.c1.forward(x, train), train), train);
        self.r2.forward(&self.b2.forward(&self.c2.forward(&x, train), train), train)
    }

    fn backward(&mut self, dy: &Array4<f32>) -> Array4<f32> {
        let d = self.b2.backward(&self.r2.backward(dy));
        let d = self.c2.backward(&d);
        let d = self.b1.backward(&self.r1.backward(&d));
        self.c1.backward(&d)
    }

    fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Param)) {
        self.c1.visit_params(&format!("{prefix}.c1"), f);
        self.b1.visit_params(&format!("{prefix}.b1"), f);
        self.c2.visit_params(&format!("{prefix}.c2"), f);
        self.b2.visit_params(&format!("{prefix}.b2"), f);
    }

    fn visit_buffers(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut ndarray::Array1<f32>)) {
        self.b1.visit_buffers(&format!("{prefix}.b1"), f);
        self.b2.visit_buffers(&format!("{prefix}.b2"), f);
    }
}

#[derive(Debug, Clone)]
struct ForwardCache {
    raw_pad: usize,
    clamp_mask: Array4<f32>,
    tanh_out: Array4<f32>,
}

/// Parametric image-to-image transform producing backdoor images.
///
/// Three down/up levels with skip connections; nearest-neighbor upsampling;
/// inputs whose sides are not multiples of 8 are zero-padded internally and
/// cropped back.
#[derive(Debug, Clone)]
pub struct TriggerGenerator {
    enc1: DoubleConv,
    enc2: DoubleConv,
    enc3: DoubleConv,
    mid: DoubleConv,
    dec3: DoubleConv,
    dec2: DoubleConv,
    dec1: DoubleConv,
    out: Conv2d,
    pools: [MaxPool2; 3],
    in_channels: usize,
    base_channels: usize,
    residual_scale: f32,
    cache: Option<ForwardCache>,
}

impl TriggerGenerator {
    pub fn new(
        in_channels: usize,
        base_channels: usize,
        residual_scale: f32,
        rng: &mut ChaCha12Rng,
    ) -> Result<Self> {
        if !(residual_scale > 0.0 && residual_scale <= 1.0) {
            return Err(Error::InvalidInput(format!(
                "residual scale must be in (0, 1], got {residual_scale}"
            )));
        }
        let b = base_channels;
        Ok(Self {
            enc1: DoubleConv::new(in_channels, b, rng),
            enc2: DoubleConv::new(b, 2 * b, rng),
            enc3: DoubleConv::new(2 * b, 4 * b, rng),
            mid: DoubleConv::new(4 * b, 8 * b, rng),
            dec3: DoubleConv::new(12 * b, 4 * b, rng),
            dec2: DoubleConv::new(6 * b, 2 * b, rng),
            dec1: DoubleConv::new(3 * b, b, rng),
            // small but nonzero head: the initial perturbation must already
            // be separable from the clean image, or the flipped loss and the
            // clean loss fight over indistinguishable inputs and clean
            // accuracy collapses
            out: Conv2d::new(b, in_channels, 1, 1, 0, rng).scaled_init(1.0),
            pools: [MaxPool2::new(), MaxPool2::new(), MaxPool2::new()],
            in_channels,
            base_channels,
            residual_scale,
            cache: None,
        })
    }

    pub fn in_channels(&self) -> usize {
        self.in_channels
    }

    pub fn base_channels(&self) -> usize {
        self.base_channels
    }

    /// Number of down/up levels.
    pub fn depth(&self) -> usize {
        3
    }

    /// Hard cap on the per-pixel perturbation magnitude.
    pub fn residual_scale(&self) -> f32 {
        self.residual_scale
    }

    fn unet_forward(&mut self, x: &Array4<f32>, train: bool) -> Array4<f32> {
        let e1 = self.enc1.forward(x, train);
        let e2 = self.enc2.forward(&self.pools[0].forward(&e1, train), train);
        let e3 = self.enc3.forward(&self.pools[1].forward(&e2, train), train);
        let m = self.mid.forward(&self.pools[2].forward(&e3, train), train);
        let d3 = self
            .dec3
            .forward(&concatenate![Axis(1), UpsampleNearest2::forward(&m), e3], train);
        let d2 = self
            .dec2
            .forward(&concatenate![Axis(1), UpsampleNearest2::forward(&d3), e2], train);
        let d1 = self
            .dec1
            .forward(&concatenate![Axis(1), UpsampleNearest2::forward(&d2), e1], train);
        self.out.forward(&d1, train)
    }

    fn unet_backward(&mut self, dy: &Array4<f32>) {
        let d = self.out.backward(dy);
        let d = self.dec1.backward(&d);
        let (du, de1) = split_channels(&d, d.dim().1 - self.enc1_channels());
        let d = self.dec2.backward(&UpsampleNearest2::backward(&du));
        let (du, de2) = split_channels(&d, d.dim().1 - self.enc2_channels());
        let d = self.dec3.backward(&UpsampleNearest2::backward(&du));
        let (du, de3) = split_channels(&d, d.dim().1 - self.enc3_channels());
        let d = self.mid.backward(&UpsampleNearest2::backward(&du));
        let d = self.enc3.backward(&(self.pools[2].backward(&d) + de3));
        let d = self.enc2.backward(&(self.pools[1].backward(&d) + de2));
        let _ = self.enc1.backward(&(self.pools[0].backward(&d) + de1));
    }

    fn enc1_channels(&self) -> usize {
        self.base_channels
    }
    fn enc2_channels(&self) -> usize {
        2 * self.base_channels
    }
    fn enc3_channels(&self) -> usize {
        4 * self.base_channels
    }

    fn pad_amount(h: usize, w: usize) -> usize {
        let target = |d: usize| d.div_ceil(8) * 8;
        let ph = (target(h) - h) / 2;
        let pw = (target(w) - w) / 2;
        assert_eq!(ph, pw, "only square padding is supported");
        assert_eq!((target(h) - h) % 2, 0, "padding must be symmetric");
        ph
    }

    /// Produce the backdoor batch `x* = clamp(x + tanh(unet(x)) * scale)`.
    ///
    /// Training mode caches everything [`Self::backward`] needs.
    pub fn forward(&mut self, x: &Array4<f32>, train: bool) -> Array4<f32> {
        let (_, c, h, w) = x.dim();
        assert_eq!(c, self.in_channels, "generator expects {} channels", self.in_channels);
        let pad = Self::pad_amount(h, w);
        let xp = pad_zeros(x, pad);
        let raw = self.unet_forward(&xp, train);
        let raw = crop(&raw, pad);
        let t = raw.mapv(f32::tanh);
        let pre = x + &t.mapv(|v| v * self.residual_scale);
        let out = pre.mapv(|v| v.clamp(0.0, 1.0));
        if train {
            // pass-through inside the closed interval; saturated pixels stop
            // receiving gradient
            let clamp_mask = pre.mapv(|v| if (0.0..=1.0).contains(&v) { 1.0 } else { 0.0 });
            self.cache = Some(ForwardCache { raw_pad: pad, clamp_mask, tanh_out: t });
        }
        out
    }

    /// Accumulate parameter gradients from the gradient w.r.t. the backdoor
    /// image. The input image is data, so its gradient is not returned.
    pub fn backward(&mut self, d_xstar: &Array4<f32>) {
        let cache = self.cache.take().expect("generator backward without cached forward");
        let mut d_raw = d_xstar * &cache.clamp_mask;
        ndarray::Zip::from(&mut d_raw).and(&cache.tanh_out).for_each(|d, &t| {
            *d *= self.residual_scale * (1.0 - t * t);
        });
        let d_raw = pad_zeros(&d_raw, cache.raw_pad);
        self.unet_backward(&d_raw);
    }

    pub fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Param)) {
        self.enc1.visit_params(&format!("{prefix}.enc1"), f);
        self.enc2.visit_params(&format!("{prefix}.enc2"), f);
        self.enc3.visit_params(&format!("{prefix}.enc3"), f);
        self.mid.visit_params(&format!("{prefix}.mid"), f);
        self.dec3.visit_params(&format!("{prefix}.dec3"), f);
        self.dec2.visit_params(&format!("{prefix}.dec2"), f);
        self.dec1.visit_params(&format!("{prefix}.dec1"), f);
        self.out.visit_params(&format!("{prefix}.out"), f);
    }

    pub fn visit_buffers(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut ndarray::Array1<f32>)) {
        self.enc1.visit_buffers(&format!("{prefix}.enc1"), f);
        self.enc2.visit_buffers(&format!("{prefix}.enc2"), f);
        self.enc3.visit_buffers(&format!("{prefix}.enc3"), f);
        self.mid.visit_buffers(&format!("{prefix}.mid"), f);
        self.dec3.visit_buffers(&format!("{prefix}.dec3"), f);
        self.dec2.visit_buffers(&format!("{prefix}.dec2"), f);
        self.dec1.visit_buffers(&format!("{prefix}.dec1"), f);
    }
}

fn split_channels(d: &Array4<f32>, at: usize) -> (Array4<f32>, Array4<f32>) {
    let a = d.slice(s![.., ..at, .., ..]).to_owned();
    let b = d.slice(s![.., at.., .., ..]).to_owned();
    (a, b)
}

/// Apply a frozen generator to a validated image batch (evaluation mode).
pub fn apply_trigger(generator: &TriggerGenerator, x: &ImageBatch) -> Result<ImageBatch> {
    let (_, c, _, _) = x.dim();
    if c != generator.in_channels() {
        return Err(Error::InvalidInput(format!(
            "generator expects {} channels, batch has {c}",
            generator.in_channels()
        )));
    }
    let out = generator.clone().forward(x.as_array(), false);
    ImageBatch::new(out)
}

/// Mean squared error between two equal-shaped image batches.
pub fn mse_loss(x: &ImageBatch, x_star: &ImageBatch) -> Result<f64> {
    check_shapes(x, x_star)?;
    let n = x.as_array().len() as f64;
    Ok(x.as_array()
        .iter()
        .zip(x_star.as_array().iter())
        .map(|(a, b)| {
            let d = (*a - *b) as f64;
            d * d
        })
        .sum::<f64>()
        / n)
}

/// Signed per-pixel difference `x_star - x`, for visualization.
pub fn residual(x: &ImageBatch, x_star: &ImageBatch) -> Result<Array4<f32>> {
    check_shapes(x, x_star)?;
    Ok(x_star.as_array() - x.as_array())
}

fn check_shapes(x: &ImageBatch, y: &ImageBatch) -> Result<()> {
    if x.dim() != y.dim() {
        return Err(Error::InvalidInput(format!(
            "shape mismatch: {:?} vs {:?}",
            x.dim(),
            y.dim()
        )));
    }
    Ok(())
}

/// Tensor-route MSE with gradient w.r.t. `x_star`, used by the training loop.
pub(crate) fn mse_with_grad(x: &Array4<f32>, x_star: &Array4<f32>) -> (f64, Array4<f32>) {
    let n = x.len() as f32;
    let diff = x_star - x;
    let loss = diff.iter().map(|d| (*d as f64) * (*d as f64)).sum::<f64>() / n as f64;
    let grad = diff.mapv(|d| 2.0 * d / n);
    (loss, grad)
}
