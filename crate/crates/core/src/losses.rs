//! Loss-function math: logit normalization, standard and flipped
//! cross-entropy, and the composite training objective.
//!
//! The scalar functions here operate on per-sample `f64` logit vectors and
//! come with hand-derived analytic gradients; they are the reference route
//! the rest of the crate is checked against. The [`batch`] submodule wraps
//! them for `[B, k]` training batches (arithmetic-mean reduction).

use crate::error::{Error, Result};
use crate::targets::EncodedLabel;

/// Pre-softmax output of a classifier for one sample.
///
/// Decomposes as magnitude times direction: `z = ||z|| * z_dir`, which is
/// what logit normalization exploits — scaling `z` by any positive factor
/// leaves the predicted class unchanged.
#[derive(Debug, Clone, PartialEq)]
pub struct LogitVector {
    values: Vec<f64>,
}

impl LogitVector {
    /// Build a logit vector; requires `k >= 2` finite entries.
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.len() < 2 {
            return Err(Error::InvalidInput(format!(
                "logit vector needs at least 2 classes, got {}",
                values.len()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput("logit vector has non-finite entries".into()));
        }
        Ok(Self { values })
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Euclidean norm `||z||`.
    pub fn magnitude(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    /// Unit vector with the same direction (zero vector maps to itself).
    pub fn direction(&self) -> Vec<f64> {
        let m = self.magnitude();
        if m == 0.0 {
            return vec![0.0; self.values.len()];
        }
        self.values.iter().map(|v| v / m).collect()
    }
}

/// Temperature and stability constant for logit normalization.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct NormalizationConfig {
    /// Softmax temperature applied after normalization. Small values sharpen
    /// the normalized distribution enough for gradients to stay informative.
    pub tau: f64,
    /// Added to the norm in the denominator so the zero vector is safe.
    pub epsilon: f64,
}

impl NormalizationConfig {
    pub fn new(tau: f64, epsilon: f64) -> Result<Self> {
        if !(tau > 0.0 && tau.is_finite()) {
            return Err(Error::InvalidInput(format!("tau must be positive, got {tau}")));
        }
        if !(epsilon > 0.0 && epsilon <= 1e-3) {
            return Err(Error::InvalidInput(format!(
                "epsilon must be in (0, 1e-3], got {epsilon}"
            )));
        }
        Ok(Self { tau, epsilon })
    }
}

impl Default for NormalizationConfig {
    fn default() -> Self {
        Self { tau: 0.04, epsilon: 1e-7 }
    }
}

/// Coefficients of the composite objective `alpha*MSE + beta*CE + gamma*LNF`,
/// balancing trigger stealthiness, clean utility, and attack dispersion.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct LossWeights {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
}

impl LossWeights {
    pub fn new(alpha: f64, beta: f64, gamma: f64) -> Result<Self> {
        for (name, w) in [("alpha", alpha), ("beta", beta), ("gamma", gamma)] {
            if !(w >= 0.0 && w.is_finite()) {
                return Err(Error::InvalidInput(format!("{name} must be >= 0, got {w}")));
            }
        }
        if alpha == 0.0 && beta == 0.0 && gamma == 0.0 {
            return Err(Error::InvalidInput("at least one loss weight must be positive".into()));
        }
        Ok(Self { alpha, beta, gamma })
    }
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { alpha: 1.0, beta: 1.0, gamma: 5.0 }
    }
}

/// Max-subtraction stabilized softmax.
pub fn softmax(z: &[f64]) -> Vec<f64> {
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exp: Vec<f64> = z.iter().map(|v| (v - max).exp()).collect();
    let sum: f64 = exp.iter().sum();
    exp.iter().map(|e| e / sum).collect()
}

/// Stabilized log-softmax.
pub fn log_softmax(z: &[f64]) -> Vec<f64> {
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = z.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
    z.iter().map(|v| v - max - lse).collect()
}

/// Index of the largest entry (first on ties).
pub fn argmax(z: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in z.iter().enumerate() {
        if *v > z[best] {
            best = i;
        }
    }
    best
}

/// Scale a logit vector to (near-)unit norm: `z / (||z|| + epsilon)`.
///
/// The zero vector maps to itself; no division by zero because the
/// denominator is at least `epsilon`.
pub fn normalize_logits(z: &LogitVector, cfg: &NormalizationConfig) -> LogitVector {
    let denom = z.magnitude() + cfg.epsilon;
    LogitVector {
        values: z.values.iter().map(|v| v / denom).collect(),
    }
}

fn check_label(y: usize, k: usize) -> Result<()> {
    if y >= k {
        return Err(Error::InvalidLabel { label: y, k });
    }
    Ok(())
}

/// Standard cross-entropy `-log softmax(z)_y`.
pub fn cross_entropy(z: &LogitVector, y: usize) -> Result<f64> {
    check_label(y, z.len())?;
    Ok(-log_softmax(&z.values)[y])
}

/// Gradient of [`cross_entropy`] with respect to `z`: `softmax(z) - onehot(y)`.
pub fn cross_entropy_grad(z: &LogitVector, y: usize) -> Result<Vec<f64>> {
    check_label(y, z.len())?;
    let mut g = softmax(&z.values);
    g[y] -= 1.0;
    Ok(g)
}

/// Cross-entropy on the normalized, temperature-scaled logits.
///
/// Invariant under positive scaling of `z` up to epsilon effects, which is
/// the property that prevents the magnitude of the logits from carrying
/// confidence information.
pub fn lognorm_ce(z: &LogitVector, y: usize, cfg: &NormalizationConfig) -> Result<f64> {
    check_label(y, z.len())?;
    let denom = (z.magnitude() + cfg.epsilon) * cfg.tau;
    let scaled: Vec<f64> = z.values.iter().map(|v| v / denom).collect();
    Ok(-log_softmax(&scaled)[y])
}

/// Gradient of [`lognorm_ce`] with respect to the raw logits.
///
/// With `u = z / (tau * (||z|| + eps))` and `p = softmax(u)`, the chain rule
/// through the normalization gives
/// `dL/dz_j = g_j / (tau*d) - z_j * (g . z) / (tau * d^2 * ||z||)`
/// where `g = p - onehot(y)` and `d = ||z|| + eps`.
///
/// Undefined at the zero vector (the norm is not differentiable there).
pub fn lognorm_ce_grad(z: &LogitVector, y: usize, cfg: &NormalizationConfig) -> Result<Vec<f64>> {
    check_label(y, z.len())?;
    let mut g_u = {
        let denom = (z.magnitude() + cfg.epsilon) * cfg.tau;
        let scaled: Vec<f64> = z.values.iter().map(|v| v / denom).collect();
        let mut p = softmax(&scaled);
        p[y] -= 1.0;
        p
    };
    chain_through_normalization(z, &mut g_u, cfg)?;
    Ok(g_u)
}

/// Flipped-label loss on normalized logits:
/// `-sum_t w_t * log softmax(z_norm / tau)_t` with `w_y = 0`.
///
/// The encoding decides the variant: all-ones-except-ground-truth yields the
/// full-range attack, a narrow target-set mask the narrow-range attack.
pub fn lnf_loss(z: &LogitVector, encoded: &EncodedLabel, cfg: &NormalizationConfig) -> Result<f64> {
    validate_encoding(z, encoded)?;
    let denom = (z.magnitude() + cfg.epsilon) * cfg.tau;
    let scaled: Vec<f64> = z.values.iter().map(|v| v / denom).collect();
    let logp = log_softmax(&scaled);
    Ok(-encoded
        .weights()
        .iter()
        .zip(&logp)
        .map(|(w, lp)| w * lp)
        .sum::<f64>())
}

/// Gradient of [`lnf_loss`] with respect to the raw logits.
///
/// In normalized space `dL/du = W * p - w` with `W = sum_t w_t`; the result
/// is then chained through the normalization as in [`lognorm_ce_grad`].
pub fn lnf_loss_grad(
    z: &LogitVector,
    encoded: &EncodedLabel,
    cfg: &NormalizationConfig,
) -> Result<Vec<f64>> {
    validate_encoding(z, encoded)?;
    let w = encoded.weights();
    let w_sum: f64 = w.iter().sum();
    let mut g_u = {
        let denom = (z.magnitude() + cfg.epsilon) * cfg.tau;
        let scaled: Vec<f64> = z.values.iter().map(|v| v / denom).collect();
        let p = softmax(&scaled);
        p.iter().zip(w).map(|(pi, wi)| w_sum * pi - wi).collect::<Vec<f64>>()
    };
    chain_through_normalization(z, &mut g_u, cfg)?;
    Ok(g_u)
}

fn validate_encoding(z: &LogitVector, encoded: &EncodedLabel) -> Result<()> {
    if encoded.weights().len() != z.len() {
        return Err(Error::InvalidInput(format!(
            "encoding length {} does not match class count {}",
            encoded.weights().len(),
            z.len()
        )));
    }
    if encoded.weights().iter().all(|w| *w == 0.0) {
        return Err(Error::InvalidEncoding(
            "all-zero encoding provides no optimization signal".into(),
        ));
    }
    Ok(())
}

/// Rewrites `g` (gradient w.r.t. `u = z / (tau*(||z||+eps))`) in place into
/// the gradient w.r.t. `z`.
fn chain_through_normalization(
    z: &LogitVector,
    g: &mut [f64],
    cfg: &NormalizationConfig,
) -> Result<()> {
    let s = z.magnitude();
    if s == 0.0 {
        return Err(Error::InvalidInput(
            "gradient undefined at the zero logit vector".into(),
        ));
    }
    let d = s + cfg.epsilon;
    let dot: f64 = g.iter().zip(&z.values).map(|(gi, zi)| gi * zi).sum();
    let a = 1.0 / (cfg.tau * d);
    let b = dot / (cfg.tau * d * d * s);
    for (gi, zi) in g.iter_mut().zip(&z.values) {
        *gi = a * *gi - b * zi;
    }
    Ok(())
}

/// Composite objective `alpha*mse + beta*ce + gamma*lnf`.
pub fn total_loss(mse: f64, ce: f64, lnf: f64, w: &LossWeights) -> f64 {
    w.alpha * mse + w.beta * ce + w.gamma * lnf
}

/// Batched `f32` wrappers over the scalar losses, used by the training loop.
///
/// All reductions are arithmetic means over the batch, and the returned
/// gradients are gradients of that mean.
pub mod batch {
    use super::*;
    use ndarray::{Array2, ArrayView2};

    fn row_to_logits(row: ndarray::ArrayView1<f32>) -> Result<LogitVector> {
        LogitVector::new(row.iter().map(|v| *v as f64).collect())
    }

    /// Mean cross-entropy over the batch plus gradient w.r.t. the logits.
    pub fn cross_entropy(logits: ArrayView2<f32>, labels: &[usize]) -> Result<(f64, Array2<f32>)> {
        let (b, _k) = logits.dim();
        if labels.len() != b {
            return Err(Error::InvalidInput(format!(
                "batch size {} != label count {}",
                b,
                labels.len()
            )));
        }
        let mut grad = Array2::<f32>::zeros(logits.raw_dim());
        let mut total = 0.0f64;
        for (i, row) in logits.outer_iter().enumerate() {
            let z = row_to_logits(row)?;
            total += super::cross_entropy(&z, labels[i])?;
            let g = super::cross_entropy_grad(&z, labels[i])?;
            for (dst, gi) in grad.row_mut(i).iter_mut().zip(&g) {
                *dst = (*gi / b as f64) as f32;
            }
        }
        Ok((total / b as f64, grad))
    }

    /// Mean flipped-label normalized loss over the batch plus gradient.
    ///
    /// `encodings` must hold one [`EncodedLabel`] per row.
    pub fn lognorm_flip(
        logits: ArrayView2<f32>,
        encodings: &[EncodedLabel],
        cfg: &NormalizationConfig,
    ) -> Result<(f64, Array2<f32>)> {
        let (b, _k) = logits.dim();
        if encodings.len() != b {
            return Err(Error::InvalidInput(format!(
                "batch size {} != encoding count {}",
                b,
                encodings.len()
            )));
        }
        let mut grad = Array2::<f32>::zeros(logits.raw_dim());
        let mut total = 0.0f64;
        for (i, row) in logits.outer_iter().enumerate() {
            let z = row_to_logits(row)?;
            total += super::lnf_loss(&z, &encodings[i], cfg)?;
            let g = super::lnf_loss_grad(&z, &encodings[i], cfg)?;
            for (dst, gi) in grad.row_mut(i).iter_mut().zip(&g) {
                *dst = (*gi / b as f64) as f32;
            }
        }
        Ok((total / b as f64, grad))
    }
}
