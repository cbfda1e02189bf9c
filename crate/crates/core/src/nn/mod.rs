//! Minimal CPU neural-network stack: layers with explicit forward/backward
//! passes, parameter containers, and optimizers.
//!
//! Convolutions lower to im2col + sgemm, which is where nearly all training
//! time goes. Every layer caches what its backward pass needs during a
//! training-mode forward; evaluation-mode forwards cache nothing and are
//! pure. All parallel loops split over disjoint output regions, so results
//! are deterministic for a fixed thread count.

pub mod conv;
pub mod linear;
pub mod norm;
pub mod optim;
pub mod pool;

use ndarray::{Array4, ArrayD};
use rand_chacha::ChaCha12Rng;
use rand_distr::{Distribution, Normal};

/// A learnable tensor with its gradient accumulator.
#[derive(Debug, Clone)]
pub struct Param {
    pub value: ArrayD<f32>,
    pub grad: ArrayD<f32>,
}

impl Param {
    pub fn zeros(shape: &[usize]) -> Self {
        Self { value: ArrayD::zeros(shape.to_vec()), grad: ArrayD::zeros(shape.to_vec()) }
    }

    /// Kaiming-normal init: `N(0, sqrt(2 / fan_in))`.
    pub fn kaiming(shape: &[usize], fan_in: usize, rng: &mut ChaCha12Rng) -> Self {
        let std = (2.0 / fan_in as f64).sqrt();
        let dist = Normal::new(0.0, std).unwrap();
        let value = ArrayD::from_shape_fn(shape.to_vec(), |_| dist.sample(rng) as f32);
        Self { grad: ArrayD::zeros(shape.to_vec()), value }
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self { value: ArrayD::ones(shape.to_vec()), grad: ArrayD::zeros(shape.to_vec()) }
    }

    pub fn zero_grad(&mut self) {
        self.grad.fill(0.0);
    }
}

/// Visitor over named parameters; the order is fixed by construction and is
/// what optimizers and checkpoints key on.
pub trait ParamVisitor {
    fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Param));
}

/// ReLU; the cached output doubles as the backward mask.
#[derive(Debug, Clone, Default)]
pub struct Relu {
    y: Option<Array4<f32>>,
}

impl Relu {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn forward(&mut self, x: &Array4<f32>, train: bool) -> Array4<f32> {
        use rayon::prelude::*;
        let mut y = Array4::<f32>::zeros(x.raw_dim());
        let xs = x.as_slice().unwrap();
        y.as_slice_mut()
            .unwrap()
            .par_chunks_mut(1 << 14)
            .zip(xs.par_chunks(1 << 14))
            .for_each(|(dst, src)| {
                for (d, v) in dst.iter_mut().zip(src) {
                    *d = if *v > 0.0 { *v } else { 0.0 };
                }
            });
        if train {
            self.y = Some(y.clone());
        }
        y
    }

    pub fn backward(&mut self, dy: &Array4<f32>) -> Array4<f32> {
        use rayon::prelude::*;
        let y = self.y.take().expect("relu backward without cached forward");
        let mut dx = Array4::<f32>::zeros(dy.raw_dim());
        let dys = dy.as_slice().unwrap();
        let ys = y.as_slice().unwrap();
        dx.as_slice_mut()
            .unwrap()
            .par_chunks_mut(1 << 14)
            .enumerate()
            .for_each(|(i, dst)| {
                let off = i * (1 << 14);
                for (j, d) in dst.iter_mut().enumerate() {
                    *d = if ys[off + j] > 0.0 { dys[off + j] } else { 0.0 };
                }
            });
        dx
    }
}

/// ReLU over `[N, D]` feature matrices.
#[derive(Debug, Clone, Default)]
pub struct ReluFlat {
    mask: Option<ndarray::Array2<f32>>,
}

impl ReluFlat {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn forward(&mut self, x: &ndarray::Array2<f32>, train: bool) -> ndarray::Array2<f32> {
        let y = x.mapv(|v| if v > 0.0 { v } else { 0.0 });
        if train {
            self.mask = Some(x.mapv(|v| if v > 0.0 { 1.0 } else { 0.0 }));
        }
        y
    }

    pub fn backward(&mut self, dy: &ndarray::Array2<f32>) -> ndarray::Array2<f32> {
        let mask = self.mask.take().expect("relu backward without cached forward");
        dy * &mask
    }
}

/// Tanh with cached output.
#[derive(Debug, Clone, Default)]
pub struct Tanh {
    y: Option<Array4<f32>>,
}

impl Tanh {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn forward(&mut self, x: &Array4<f32>, train: bool) -> Array4<f32> {
        let y = x.mapv(f32::tanh);
        if train {
            self.y = Some(y.clone());
        }
        y
    }

    pub fn backward(&mut self, dy: &Array4<f32>) -> Array4<f32> {
        let y = self.y.take().expect("tanh backward without cached forward");
        dy * &y.mapv(|v| 1.0 - v * v)
    }
}

/// Pad an image batch with zeros on both sides of H and W.
pub fn pad_zeros(x: &Array4<f32>, pad: usize) -> Array4<f32> {
    if pad == 0 {
        return x.clone();
    }
    let (n, c, h, w) = x.dim();
    let mut out = Array4::zeros((n, c, h + 2 * pad, w + 2 * pad));
    out.slice_mut(ndarray::s![.., .., pad..pad + h, pad..pad + w]).assign(x);
    out
}

/// Inverse of [`pad_zeros`]: drop `pad` pixels from each border.
pub fn crop(x: &Array4<f32>, pad: usize) -> Array4<f32> {
    if pad == 0 {
        return x.clone();
    }
    let (_, _, h, w) = x.dim();
    x.slice(ndarray::s![.., .., pad..h - pad, pad..w - pad]).to_owned()
}

#[cfg(test)]
pub(crate) mod gradcheck {
    //! Finite-difference helpers shared by the layer tests. Objectives are
    //! accumulated in f64 so the differences are not swamped by f32 rounding.

    use super::*;

    /// Sum-of-squares objective in f64.
    pub fn sq_loss(y: &Array4<f32>) -> f64 {
        y.iter().map(|v| (*v as f64) * (*v as f64)).sum()
    }

    /// Central finite differences with respect to one input element.
    pub fn fd_input(
        x: &mut Array4<f32>,
        idx: usize,
        h: f32,
        mut f: impl FnMut(&Array4<f32>) -> f64,
    ) -> f64 {
        let orig = x.as_slice().unwrap()[idx];
        x.as_slice_mut().unwrap()[idx] = orig + h;
        let lp = f(x);
        x.as_slice_mut().unwrap()[idx] = orig - h;
        let lm = f(x);
        x.as_slice_mut().unwrap()[idx] = orig;
        (lp - lm) / (2.0 * h as f64)
    }

    pub fn assert_close(analytic: f32, fd: f64, tol: f64, what: &str) {
        let a = analytic as f64;
        let denom = a.abs().max(fd.abs()).max(1e-2);
        assert!((a - fd).abs() / denom <= tol, "{what}: analytic {analytic} vs fd {fd}");
    }
}
