//! 2D convolution lowered to im2col + sgemm.

use ndarray::parallel::prelude::*;
use ndarray::{s, Array2, Array4, Axis};
use rand_chacha::ChaCha12Rng;

use super::{pad_zeros, Param};

#[derive(Debug, Clone)]
struct Cache {
    cols: Array2<f32>,
    padded_dim: (usize, usize, usize, usize),
}

/// Convolution over `[N, C, H, W]` batches with square kernels.
#[derive(Debug, Clone)]
pub struct Conv2d {
    pub w: Param,
    pub b: Param,
    cin: usize,
    cout: usize,
    k: usize,
    stride: usize,
    pad: usize,
    cache: Option<Cache>,
}

impl Conv2d {
    pub fn new(
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
        pad: usize,
        rng: &mut ChaCha12Rng,
    ) -> Self {
        Self {
            w: Param::kaiming(&[cout, cin, k, k], cin * k * k, rng),
            b: Param::zeros(&[cout]),
            cin,
            cout,
            k,
            stride,
            pad,
            cache: None,
        }
    }

    /// Scale the initial weights; used for output heads that should start
    /// small but nonzero.
    pub fn scaled_init(mut self, factor: f32) -> Self {
        self.w.value.mapv_inplace(|v| v * factor);
        self
    }

    pub fn out_hw(&self, h: usize, w: usize) -> (usize, usize) {
        (
            (h + 2 * self.pad - self.k) / self.stride + 1,
            (w + 2 * self.pad - self.k) / self.stride + 1,
        )
    }

    pub fn in_channels(&self) -> usize {
        self.cin
    }

    pub fn out_channels(&self) -> usize {
        self.cout
    }

    fn im2col(&self, xp: &Array4<f32>, oh: usize, ow: usize) -> Array2<f32> {
        let (n, _c, _hp, wp) = xp.dim();
        let rows = self.cin * self.k * self.k;
        let mut cols = Array2::<f32>::zeros((rows, n * oh * ow));
        let xs = xp.as_slice().expect("padded input is contiguous");
        let (k, stride) = (self.k, self.stride);
        let (hp_w, chw) = (wp, xp.dim().1 * xp.dim().2 * wp);
        let hw = xp.dim().2 * wp;
        cols.axis_iter_mut(Axis(0))
            .into_par_iter()
            .enumerate()
            .for_each(|(r, mut row)| {
                let c = r / (k * k);
                let ki = (r / k) % k;
                let kj = r % k;
                let dst = row.as_slice_mut().expect("row is contiguous");
                for ni in 0..n {
                    for ohi in 0..oh {
                        let src_row = ohi * stride + ki;
                        let base = ni * chw + c * hw + src_row * hp_w;
                        let out_base = ni * oh * ow + ohi * ow;
                        if stride == 1 {
                            // explicit loop: short runs inline better than memcpy
                            let src = &xs[base + kj..base + kj + ow];
                            let d = &mut dst[out_base..out_base + ow];
                            for (dv, sv) in d.iter_mut().zip(src) {
                                *dv = *sv;
                            }
                        } else {
                            for owi in 0..ow {
                                dst[out_base + owi] = xs[base + owi * stride + kj];
                            }
                        }
                    }
                }
            });
        cols
    }

    pub fn forward(&mut self, x: &Array4<f32>, train: bool) -> Array4<f32> {
        let (n, c, h, w) = x.dim();
        assert_eq!(c, self.cin, "conv expects {} input channels, got {c}", self.cin);
        let xp = pad_zeros(x, self.pad);
        let (oh, ow) = self.out_hw(h, w);
        let cols = self.im2col(&xp, oh, ow);

        let wm = self
            .w
            .value
            .view()
            .into_shape_with_order((self.cout, self.cin * self.k * self.k))
            .expect("weights contiguous");
        // wide-by-narrow orientation: much faster than [cout, n*oh*ow] when
        // cout is small, which it is for every layer here
        let mut y2t = Array2::<f32>::zeros((n * oh * ow, self.cout));
        ndarray::linalg::general_mat_mul(1.0, &cols.t(), &wm.t(), 0.0, &mut y2t);

        let mut out = Array4::<f32>::zeros((n, self.cout, oh, ow));
        let bias = self.b.value.as_slice().unwrap().to_vec();
        let y2s = y2t.as_slice().unwrap();
        let (cout, ohw) = (self.cout, oh * ow);
        out.axis_iter_mut(Axis(0))
            .into_par_iter()
            .enumerate()
            .for_each(|(ni, mut on)| {
                let dst = on.as_slice_mut().unwrap();
                let base = ni * ohw * cout;
                for co in 0..cout {
                    let d = &mut dst[co * ohw..(co + 1) * ohw];
                    let bv = bias[co];
                    for (p, dv) in d.iter_mut().enumerate() {
                        *dv = y2s[base + p * cout + co] + bv;
                    }
                }
            });

        if train {
            self.cache = Some(Cache { cols, padded_dim: xp.dim() });
        }
        out
    }

    pub fn backward(&mut self, dy: &Array4<f32>) -> Array4<f32> {
        let cache = self.cache.take().expect("conv backward without cached forward");
        let (n, cout, oh, ow) = dy.dim();
        let ohw = oh * ow;
        let ncols = n * ohw;
        let rows = self.cin * self.k * self.k;
        let wm = self
            .w
            .value
            .view()
            .into_shape_with_order((self.cout, rows))
            .unwrap();

        // per-image backward: dy[i] is already a contiguous [cout, oh*ow]
        // view, the local dcols block stays cache-resident, and each image
        // scatters into its own slice of dxp, so the loop parallelizes
        // without races; per-image dW/db partials are reduced in index order
        // to keep results deterministic
        let mut dxp = Array4::<f32>::zeros(cache.padded_dim);
        let (k, stride, pad) = (self.k, self.stride, self.pad);
        let cols = &cache.cols;

        let partials: Vec<(Array2<f32>, Vec<f32>)> = dxp
            .axis_iter_mut(Axis(0))
            .into_par_iter()
            .enumerate()
            .map(|(ni, mut dxi)| {
                let dym_i = dy
                    .index_axis(Axis(0), ni)
                    .into_shape_with_order((cout, ohw))
                    .expect("dy contiguous");
                let cols_i = cols.slice(s![.., ni * ohw..(ni + 1) * ohw]);

                // dW partial and bias partial
                let dw_i = dym_i.dot(&cols_i.t()); // [cout, rows]
                let db_i: Vec<f32> = dym_i.outer_iter().map(|r| r.sum()).collect();

                // input gradient for this image
                let mut dcols_i = Array2::<f32>::zeros((rows, ohw));
                ndarray::linalg::general_mat_mul(1.0, &wm.t(), &dym_i, 0.0, &mut dcols_i);
                let dcs = dcols_i.as_slice().unwrap();
                let (cin, hp, wp) = (dxi.dim().0, dxi.dim().1, dxi.dim().2);
                let dxs = dxi.as_slice_mut().expect("dxp image slice contiguous");
                for c in 0..cin {
                    for ki in 0..k {
                        for kj in 0..k {
                            let r = (c * k + ki) * k + kj;
                            let src = &dcs[r * ohw..(r + 1) * ohw];
                            for ohi in 0..oh {
                                let row = ohi * stride + ki;
                                let base = c * hp * wp + row * wp;
                                let drow = &mut dxs[base..base + wp];
                                if stride == 1 {
                                    let s = &src[ohi * ow..(ohi + 1) * ow];
                                    for (owi, sv) in s.iter().enumerate() {
                                        drow[kj + owi] += *sv;
                                    }
                                } else {
                                    for owi in 0..ow {
                                        drow[owi * stride + kj] += src[ohi * ow + owi];
                                    }
                                }
                            }
                        }
                    }
                }
                (dw_i, db_i)
            })
            .collect();

        {
            let mut gw = self
                .w
                .grad
                .view_mut()
                .into_shape_with_order((self.cout, rows))
                .unwrap();
            let gb = self.b.grad.as_slice_mut().unwrap();
            for (dw_i, db_i) in &partials {
                gw += dw_i;
                for (g, d) in gb.iter_mut().zip(db_i) {
                    *g += d;
                }
            }
        }

        let _ = ncols;
        if pad == 0 {
            dxp
        } else {
            super::crop(&dxp, pad)
        }
    }

    pub fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Param)) {
        f(format!("{prefix}.weight"), &mut self.w);
        f(format!("{prefix}.bias"), &mut self.b);
    }
}
