//! Spatial resampling: 2x2 max pooling, nearest-neighbor 2x upsampling, and
//! global average pooling.

use ndarray::{Array2, Array4, Axis};
use rayon::prelude::*;

/// 2x2 max pooling with stride 2 (floor semantics: a trailing odd row or
/// column is ignored).
#[derive(Debug, Clone, Default)]
pub struct MaxPool2 {
    // per output element, the index 0..4 of the max within its 2x2 window
    argmax: Option<(Array4<u8>, (usize, usize, usize, usize))>,
}

impl MaxPool2 {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn forward(&mut self, x: &Array4<f32>, train: bool) -> Array4<f32> {
        let (n, c, h, w) = x.dim();
        let (oh, ow) = (h / 2, w / 2);
        let mut y = Array4::<f32>::zeros((n, c, oh, ow));
        let mut arg = Array4::<u8>::zeros((n, c, oh, ow));
        let xs = x.as_slice().unwrap();

        y.as_slice_mut()
            .unwrap()
            .par_chunks_mut(oh * ow)
            .zip(arg.as_slice_mut().unwrap().par_chunks_mut(oh * ow))
            .enumerate()
            .for_each(|(nc, (yc, ac))| {
                let base = nc * h * w;
                for i in 0..oh {
                    for j in 0..ow {
                        let p = base + (2 * i) * w + 2 * j;
                        let vals = [xs[p], xs[p + 1], xs[p + w], xs[p + w + 1]];
                        let mut best = 0u8;
                        for t in 1..4 {
                            if vals[t as usize] > vals[best as usize] {
                                best = t;
                            }
                        }
                        yc[i * ow + j] = vals[best as usize];
                        ac[i * ow + j] = best;
                    }
                }
            });

        if train {
            self.argmax = Some((arg, (n, c, h, w)));
        }
        y
    }

    pub fn backward(&mut self, dy: &Array4<f32>) -> Array4<f32> {
        let (arg, (n, c, h, w)) = self.argmax.take().expect("maxpool backward without forward");
        let (_, _, oh, ow) = dy.dim();
        let mut dx = Array4::<f32>::zeros((n, c, h, w));
        let dys = dy.as_slice().unwrap();
        let args = arg.as_slice().unwrap();

        dx.as_slice_mut()
            .unwrap()
            .par_chunks_mut(h * w)
            .enumerate()
            .for_each(|(nc, dxc)| {
                let base = nc * oh * ow;
                for i in 0..oh {
                    for j in 0..ow {
                        let o = base + i * ow + j;
                        let a = args[o] as usize;
                        let (di, dj) = (a / 2, a % 2);
                        dxc[(2 * i + di) * w + 2 * j + dj] += dys[o];
                    }
                }
            });
        dx
    }
}

/// Nearest-neighbor 2x upsampling.
#[derive(Debug, Clone, Default)]
pub struct UpsampleNearest2;

impl UpsampleNearest2 {
    pub fn forward(x: &Array4<f32>) -> Array4<f32> {
        let (n, c, h, w) = x.dim();
        let mut y = Array4::<f32>::zeros((n, c, 2 * h, 2 * w));
        let xs = x.as_slice().unwrap();
        y.as_slice_mut()
            .unwrap()
            .par_chunks_mut(4 * h * w)
            .enumerate()
            .for_each(|(nc, yc)| {
                let base = nc * h * w;
                for i in 0..h {
                    for j in 0..w {
                        let v = xs[base + i * w + j];
                        let p = (2 * i) * 2 * w + 2 * j;
                        yc[p] = v;
                        yc[p + 1] = v;
                        yc[p + 2 * w] = v;
                        yc[p + 2 * w + 1] = v;
                    }
                }
            });
        y
    }

    /// Gradient: sum over each 2x2 block.
    pub fn backward(dy: &Array4<f32>) -> Array4<f32> {
        let (n, c, h2, w2) = dy.dim();
        let (h, w) = (h2 / 2, w2 / 2);
        let mut dx = Array4::<f32>::zeros((n, c, h, w));
        let dys = dy.as_slice().unwrap();
        dx.as_slice_mut()
            .unwrap()
            .par_chunks_mut(h * w)
            .enumerate()
            .for_each(|(nc, dxc)| {
                let base = nc * h2 * w2;
                for i in 0..h {
                    for j in 0..w {
                        let p = base + (2 * i) * w2 + 2 * j;
                        dxc[i * w + j] = dys[p] + dys[p + 1] + dys[p + w2] + dys[p + w2 + 1];
                    }
                }
            });
        dx
    }
}

/// Mean over the spatial dimensions: `[N, C, H, W] -> [N, C]`.
#[derive(Debug, Clone, Default)]
pub struct GlobalAvgPool {
    hw: Option<(usize, usize)>,
}

impl GlobalAvgPool {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn forward(&mut self, x: &Array4<f32>, train: bool) -> Array2<f32> {
        let (n, c, h, w) = x.dim();
        let mut y = Array2::<f32>::zeros((n, c));
        for ni in 0..n {
            for ci in 0..c {
                y[[ni, ci]] = x.index_axis(Axis(0), ni).index_axis(Axis(0), ci).sum()
                    / (h * w) as f32;
            }
        }
        if train {
            self.hw = Some((h, w));
        }
        y
    }

    pub fn backward(&mut self, dy: &Array2<f32>) -> Array4<f32> {
        let (h, w) = self.hw.take().expect("avgpool backward without forward");
        let (n, c) = dy.dim();
        let scale = 1.0 / (h * w) as f32;
        Array4::from_shape_fn((n, c, h, w), |(ni, ci, _, _)| dy[[ni, ci]] * scale)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array4;

    #[test]
    fn maxpool_picks_window_max_and_routes_gradient() {
        let x = Array4::from_shape_vec(
            (1, 1, 4, 4),
            vec![
                1.0, 2.0, 0.0, 1.0, //
                3.0, 0.0, 1.0, 5.0, //
                0.0, 0.0, 2.0, 1.0, //
                0.0, 4.0, 0.0, 0.0,
            ],
        )
        .unwrap();
        let mut pool = MaxPool2::new();
        let y = pool.forward(&x, true);
        assert_eq!(y.as_slice().unwrap(), &[3.0, 5.0, 4.0, 2.0]);
        let dy = Array4::from_shape_vec((1, 1, 2, 2), vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let dx = pool.backward(&dy);
        assert_eq!(dx[[0, 0, 1, 0]], 1.0); // 3.0 was at (1,0)
        assert_eq!(dx[[0, 0, 1, 3]], 2.0); // 5.0 at (1,3)
        assert_eq!(dx[[0, 0, 3, 1]], 3.0); // 4.0 at (3,1)
        assert_eq!(dx[[0, 0, 2, 2]], 4.0); // 2.0 at (2,2)
        assert_eq!(dx.sum(), 10.0);
    }

    #[test]
    fn maxpool_floor_ignores_odd_edge() {
        let x = Array4::from_shape_fn((1, 1, 5, 5), |(_, _, i, j)| (i * 5 + j) as f32);
        let mut pool = MaxPool2::new();
        let y = pool.forward(&x, false);
        assert_eq!(y.dim(), (1, 1, 2, 2));
        assert_eq!(y[[0, 0, 1, 1]], 18.0); // max of rows 2-3, cols 2-3
    }

    #[test]
    fn upsample_round_trip_gradient() {
        let x = Array4::from_shape_vec((1, 1, 2, 2), vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let y = UpsampleNearest2::forward(&x);
        assert_eq!(y.dim(), (1, 1, 4, 4));
        assert_eq!(y[[0, 0, 0, 1]], 1.0);
        assert_eq!(y[[0, 0, 3, 3]], 4.0);
        let dx = UpsampleNearest2::backward(&y);
        // each input element receives 4x its own value
        assert_eq!(dx.as_slice().unwrap(), &[4.0, 8.0, 12.0, 16.0]);
    }

    #[test]
    fn global_avg_pool() {
        let x = Array4::from_shape_fn((2, 3, 4, 4), |(n, c, _, _)| (n * 3 + c) as f32);
        let mut gap = GlobalAvgPool::new();
        let y = gap.forward(&x, true);
        assert_eq!(y[[1, 2]], 5.0);
        let dy = Array2::from_elem((2, 3), 16.0);
        let dx = gap.backward(&dy);
        assert!(dx.iter().all(|v| (*v - 1.0).abs() < 1e-6));
    }
}
