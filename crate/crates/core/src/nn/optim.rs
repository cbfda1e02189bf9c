//! Optimizers: Adam and momentum SGD with an optional cosine schedule.

use std::collections::HashMap;

use ndarray::ArrayD;

use super::Param;

/// Adam with bias correction. State is keyed by parameter name, so the same
/// optimizer instance can step several networks as long as their name
/// prefixes do not collide.
#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f32,
    beta1: f32,
    beta2: f32,
    eps: f32,
    t: u64,
    state: HashMap<String, (ArrayD<f32>, ArrayD<f32>)>,
}

impl Adam {
    pub fn new(lr: f32) -> Self {
        Self { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, t: 0, state: HashMap::new() }
    }

    /// First and second moment estimates for a parameter, if any.
    pub fn state_of(&self, name: &str) -> Option<(&ArrayD<f32>, &ArrayD<f32>)> {
        self.state.get(name).map(|(m, v)| (m, v))
    }

    /// Reinstall checkpointed moments for a parameter.
    pub fn restore_state(&mut self, name: &str, m: ArrayD<f32>, v: ArrayD<f32>) {
        self.state.insert(name.to_string(), (m, v));
    }

    /// Restore the bias-correction step counter.
    pub fn restore_step(&mut self, t: u64) {
        self.t = t;
    }

    /// Call once per optimization step, before updating parameters.
    pub fn begin_step(&mut self) {
        self.t += 1;
    }

    /// Apply the Adam update to one parameter and clear its gradient.
    pub fn update(&mut self, name: &str, p: &mut Param) {
        let (m, v) = self
            .state
            .entry(name.to_string())
            .or_insert_with(|| (ArrayD::zeros(p.value.shape()), ArrayD::zeros(p.value.shape())));
        let b1 = self.beta1;
        let b2 = self.beta2;
        let bc1 = 1.0 - b1.powi(self.t as i32);
        let bc2 = 1.0 - b2.powi(self.t as i32);
        let lr = self.lr;
        let eps = self.eps;
        ndarray::Zip::from(&mut p.value)
            .and(&p.grad)
            .and(m)
            .and(v)
            .for_each(|w, &g, mi, vi| {
                *mi = b1 * *mi + (1.0 - b1) * g;
                *vi = b2 * *vi + (1.0 - b2) * g * g;
                let mh = *mi / bc1;
                let vh = *vi / bc2;
                *w -= lr * mh / (vh.sqrt() + eps);
            });
        p.zero_grad();
    }
}

/// SGD with classical momentum.
#[derive(Debug, Clone)]
pub struct SgdMomentum {
    pub lr: f32,
    momentum: f32,
    weight_decay: f32,
    state: HashMap<String, ArrayD<f32>>,
}

impl SgdMomentum {
    pub fn new(lr: f32, momentum: f32, weight_decay: f32) -> Self {
        Self { lr, momentum, weight_decay, state: HashMap::new() }
    }

    pub fn state_of(&self, name: &str) -> Option<&ArrayD<f32>> {
        self.state.get(name)
    }

    pub fn restore_state(&mut self, name: &str, v: ArrayD<f32>) {
        self.state.insert(name.to_string(), v);
    }

    pub fn update(&mut self, name: &str, p: &mut Param) {
        let vel = self
            .state
            .entry(name.to_string())
            .or_insert_with(|| ArrayD::zeros(p.value.shape()));
        let mu = self.momentum;
        let wd = self.weight_decay;
        let lr = self.lr;
        ndarray::Zip::from(&mut p.value).and(&p.grad).and(vel).for_each(|w, &g, v| {
            let g = g + wd * *w;
            *v = mu * *v + g;
            *w -= lr * *v;
        });
        p.zero_grad();
    }
}

/// Optimizer selector shared by the training loop.
#[derive(Debug, Clone)]
pub enum Optimizer {
    Adam(Adam),
    Sgd(SgdMomentum),
}

impl Optimizer {
    pub fn begin_step(&mut self) {
        if let Optimizer::Adam(a) = self {
            a.begin_step();
        }
    }

    pub fn update(&mut self, name: &str, p: &mut Param) {
        match self {
            Optimizer::Adam(a) => a.update(name, p),
            Optimizer::Sgd(s) => s.update(name, p),
        }
    }

    pub fn set_lr(&mut self, lr: f32) {
        match self {
            Optimizer::Adam(a) => a.lr = lr,
            Optimizer::Sgd(s) => s.lr = lr,
        }
    }

    pub fn lr(&self) -> f32 {
        match self {
            Optimizer::Adam(a) => a.lr,
            Optimizer::Sgd(s) => s.lr,
        }
    }
}

/// Cosine learning-rate decay from `base` to 0 over `total` epochs.
pub fn cosine_lr(base: f32, epoch: usize, total: usize) -> f32 {
    if total == 0 {
        return base;
    }
    let progress = epoch as f32 / total as f32;
    base * 0.5 * (1.0 + (std::f32::consts::PI * progress).cos())
}
