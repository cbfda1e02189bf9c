//! Fully connected layer.

use ndarray::Array2;
use rand_chacha::ChaCha12Rng;

use super::Param;

#[derive(Debug, Clone)]
pub struct Linear {
    pub w: Param,
    pub b: Param,
    din: usize,
    dout: usize,
    cache: Option<Array2<f32>>,
}

impl Linear {
    pub fn new(din: usize, dout: usize, rng: &mut ChaCha12Rng) -> Self {
        Self {
            w: Param::kaiming(&[dout, din], din, rng),
            b: Param::zeros(&[dout]),
            din,
            dout,
            cache: None,
        }
    }

    pub fn in_features(&self) -> usize {
        self.din
    }

    /// `y = x W^T + b` over `[N, din]`.
    pub fn forward(&mut self, x: &Array2<f32>, train: bool) -> Array2<f32> {
        let wm = self.w.value.view().into_shape_with_order((self.dout, self.din)).unwrap();
        let mut y = x.dot(&wm.t());
        let b = self.b.value.as_slice().unwrap();
        for mut row in y.rows_mut() {
            for (v, bv) in row.iter_mut().zip(b) {
                *v += bv;
            }
        }
        if train {
            self.cache = Some(x.clone());
        }
        y
    }

    pub fn backward(&mut self, dy: &Array2<f32>) -> Array2<f32> {
        let x = self.cache.take().expect("linear backward without cached forward");
        {
            let mut gw = self.w.grad.view_mut().into_shape_with_order((self.dout, self.din)).unwrap();
            gw += &dy.t().dot(&x);
        }
        {
            let gb = self.b.grad.as_slice_mut().unwrap();
            for row in dy.rows() {
                for (g, d) in gb.iter_mut().zip(row) {
                    *g += d;
                }
            }
        }
        let wm = self.w.value.view().into_shape_with_order((self.dout, self.din)).unwrap();
        dy.dot(&wm)
    }

    pub fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Param)) {
        f(format!("{prefix}.weight"), &mut self.w);
        f(format!("{prefix}.bias"), &mut self.b);
    }
}
