//! Batch normalization over `[N, C, H, W]`.

use ndarray::{Array1, Array4};
use rayon::prelude::*;

use super::Param;

#[derive(Debug, Clone)]
struct Cache {
    x_hat: Array4<f32>,
    inv_std: Array1<f32>,
}

/// Batch normalization with running statistics for evaluation mode.
#[derive(Debug, Clone)]
pub struct BatchNorm2d {
    pub gamma: Param,
    pub beta: Param,
    pub running_mean: Array1<f32>,
    pub running_var: Array1<f32>,
    channels: usize,
    eps: f32,
    momentum: f32,
    cache: Option<Cache>,
}

impl BatchNorm2d {
    pub fn new(channels: usize) -> Self {
        Self {
            gamma: Param::ones(&[channels]),
            beta: Param::zeros(&[channels]),
            running_mean: Array1::zeros(channels),
            running_var: Array1::ones(channels),
            channels,
            eps: 1e-5,
            momentum: 0.1,
            cache: None,
        }
    }

    pub fn forward(&mut self, x: &Array4<f32>, train: bool) -> Array4<f32> {
        let (n, c, h, w) = x.dim();
        assert_eq!(c, self.channels);
        let hw = h * w;
        let m = (n * hw) as f32;
        let gamma = self.gamma.value.as_slice().unwrap();
        let beta = self.beta.value.as_slice().unwrap();
        let xs = x.as_slice().unwrap();

        if !train {
            let mut y = Array4::<f32>::zeros(x.raw_dim());
            let rm = &self.running_mean;
            let rv = &self.running_var;
            let eps = self.eps;
            y.as_slice_mut()
                .unwrap()
                .par_chunks_mut(hw)
                .enumerate()
                .for_each(|(nc, yc)| {
                    let ci = nc % c;
                    let inv = 1.0 / (rv[ci] + eps).sqrt();
                    let (mu, g, b) = (rm[ci], gamma[ci], beta[ci]);
                    let src = &xs[nc * hw..(nc + 1) * hw];
                    for (d, v) in yc.iter_mut().zip(src) {
                        *d = (v - mu) * inv * g + b;
                    }
                });
            return y;
        }

        // one reduction pass per channel (sum and sum of squares), run in
        // parallel over channels
        let stats: Vec<(f32, f32)> = (0..c)
            .into_par_iter()
            .map(|ci| {
                let mut sum = 0.0f64;
                let mut sumsq = 0.0f64;
                for ni in 0..n {
                    let base = (ni * c + ci) * hw;
                    for v in &xs[base..base + hw] {
                        let v = *v as f64;
                        sum += v;
                        sumsq += v * v;
                    }
                }
                let mu = sum / m as f64;
                let var = (sumsq / m as f64 - mu * mu).max(0.0);
                (mu as f32, var as f32)
            })
            .collect();

        let mut inv_std = Array1::<f32>::zeros(c);
        for ci in 0..c {
            inv_std[ci] = 1.0 / (stats[ci].1 + self.eps).sqrt();
        }

        // fused pass producing x_hat and y together
        let mut x_hat = Array4::<f32>::zeros(x.raw_dim());
        let mut y = Array4::<f32>::zeros(x.raw_dim());
        let inv_ref = &inv_std;
        let stats_ref = &stats;
        x_hat
            .as_slice_mut()
            .unwrap()
            .par_chunks_mut(hw)
            .zip(y.as_slice_mut().unwrap().par_chunks_mut(hw))
            .enumerate()
            .for_each(|(nc, (xh, yc))| {
                let ci = nc % c;
                let (mu, _) = stats_ref[ci];
                let inv = inv_ref[ci];
                let (g, b) = (gamma[ci], beta[ci]);
                let src = &xs[nc * hw..(nc + 1) * hw];
                for ((h_dst, y_dst), v) in xh.iter_mut().zip(yc.iter_mut()).zip(src) {
                    let norm = (v - mu) * inv;
                    *h_dst = norm;
                    *y_dst = norm * g + b;
                }
            });

        // unbiased variance for the running estimate
        let bessel = if m > 1.0 { m / (m - 1.0) } else { 1.0 };
        for ci in 0..c {
            self.running_mean[ci] =
                (1.0 - self.momentum) * self.running_mean[ci] + self.momentum * stats[ci].0;
            self.running_var[ci] = (1.0 - self.momentum) * self.running_var[ci]
                + self.momentum * stats[ci].1 * bessel;
        }

        self.cache = Some(Cache { x_hat, inv_std });
        y
    }

    pub fn backward(&mut self, dy: &Array4<f32>) -> Array4<f32> {
        let cache = self.cache.take().expect("batchnorm backward without cached forward");
        let (n, c, h, w) = dy.dim();
        let hw = h * w;
        let m = (n * hw) as f32;
        let gamma = self.gamma.value.as_slice().unwrap().to_vec();
        let dys = dy.as_slice().unwrap();
        let xhs = cache.x_hat.as_slice().unwrap();

        // per-channel reductions in parallel
        let sums: Vec<(f32, f32)> = (0..c)
            .into_par_iter()
            .map(|ci| {
                let mut s = 0.0f64;
                let mut sx = 0.0f64;
                for ni in 0..n {
                    let base = (ni * c + ci) * hw;
                    for (dv, xv) in dys[base..base + hw].iter().zip(&xhs[base..base + hw]) {
                        s += *dv as f64;
                        sx += (*dv as f64) * (*xv as f64);
                    }
                }
                (s as f32, sx as f32)
            })
            .collect();

        {
            let g_gamma = self.gamma.grad.as_slice_mut().unwrap();
            let g_beta = self.beta.grad.as_slice_mut().unwrap();
            for ci in 0..c {
                g_beta[ci] += sums[ci].0;
                g_gamma[ci] += sums[ci].1;
            }
        }

        let mut dx = Array4::<f32>::zeros(dy.raw_dim());
        let inv_ref = &cache.inv_std;
        let sums_ref = &sums;
        let gamma_ref = &gamma;
        dx.as_slice_mut()
            .unwrap()
            .par_chunks_mut(hw)
            .enumerate()
            .for_each(|(nc, dxc)| {
                let ci = nc % c;
                let scale = gamma_ref[ci] * inv_ref[ci];
                let mean_dy = sums_ref[ci].0 / m;
                let mean_dy_xh = sums_ref[ci].1 / m;
                let base = nc * hw;
                for (i, d) in dxc.iter_mut().enumerate() {
                    *d = scale * (dys[base + i] - mean_dy - xhs[base + i] * mean_dy_xh);
                }
            });
        dx
    }

    pub fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Param)) {
        f(format!("{prefix}.gamma"), &mut self.gamma);
        f(format!("{prefix}.beta"), &mut self.beta);
    }

    /// Non-trainable state that still belongs in checkpoints.
    pub fn visit_buffers(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Array1<f32>)) {
        f(format!("{prefix}.running_mean"), &mut self.running_mean);
        f(format!("{prefix}.running_var"), &mut self.running_var);
    }
}
