//! Naive untargeted-backdoor baseline: flipped-label cross-entropy applied
//! to *raw* logits, without logit normalization.
//!
//! Trained this way, the optimizer satisfies the flipped objective by
//! inflating logit magnitudes toward whichever wrong class is easiest, so
//! the attack collapses into a near-targeted one. The baseline shares the
//! trigger generator and budget with the main method, isolating the loss
//! as the only varied factor.

use ndarray::{Array2, ArrayView2};

use crate::error::{Error, Result};
use crate::losses::{log_softmax, softmax, LogitVector};
use crate::targets::EncodedLabel;
use crate::training::{train, LossMode, TrainConfig, TrainOutcome};

/// Flipped-label cross-entropy on raw logits:
/// `-sum_{t != y} log softmax(z)_t`.
pub fn naive_flip_loss(z: &LogitVector, y: usize) -> Result<f64> {
    if y >= z.len() {
        return Err(Error::InvalidLabel { label: y, k: z.len() });
    }
    let logp = log_softmax(z.values());
    Ok(-logp.iter().enumerate().filter(|(t, _)| *t != y).map(|(_, lp)| lp).sum::<f64>())
}

/// Gradient of [`naive_flip_loss`] with respect to `z`:
/// `(k-1) * softmax(z) - (1 - onehot(y))`.
pub fn naive_flip_grad(z: &LogitVector, y: usize) -> Result<Vec<f64>> {
    if y >= z.len() {
        return Err(Error::InvalidLabel { label: y, k: z.len() });
    }
    let k = z.len();
    let p = softmax(z.values());
    Ok((0..k)
        .map(|j| (k - 1) as f64 * p[j] - if j == y { 0.0 } else { 1.0 })
        .collect())
}

/// Batched mean naive-flip loss with gradients, weighted by an encoding so
/// the training loop can reuse its target-set plumbing. For the classic
/// baseline the encoding is the full flipped one-hot.
pub fn batch_naive_flip(
    logits: ArrayView2<f32>,
    encodings: &[EncodedLabel],
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
        let z: Vec<f64> = row.iter().map(|v| *v as f64).collect();
        let w = encodings[i].weights();
        if w.len() != z.len() {
            return Err(Error::InvalidInput("encoding length mismatch".into()));
        }
        let logp = log_softmax(&z);
        total += -w.iter().zip(&logp).map(|(wi, lp)| wi * lp).sum::<f64>();
        let p = softmax(&z);
        let w_sum: f64 = w.iter().sum();
        for (j, dst) in grad.row_mut(i).iter_mut().enumerate() {
            *dst = ((w_sum * p[j] - w[j]) / b as f64) as f32;
        }
    }
    Ok((total / b as f64, grad))
}

/// Train the collapsing baseline: same pipeline, loss switched to the raw
/// flipped cross-entropy.
pub fn train_baseline(
    config: &TrainConfig,
    data: &crate::data::LoadedDataset,
    run_dir: &std::path::Path,
    resume: bool,
    force: bool,
) -> Result<TrainOutcome> {
    if config.loss_mode != LossMode::NaiveFlip {
        return Err(Error::InvalidConfig(vec![format!(
            "baseline training requires loss_mode = naive_flip, got {:?}",
            config.loss_mode
        )]));
    }
    train(config, data, run_dir, resume, force)
}
