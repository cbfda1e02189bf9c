//! Defense-resistance harness: perturbation-entropy analysis and
//! fine-pruning sweeps against a trained checkpoint.
//!
//! The entropy defense blends each input with random clean images and flags
//! low prediction entropy as backdoor evidence; a dispersion-trained
//! backdoor keeps triggered predictions high-entropy, so the two
//! distributions overlap. The pruning defense removes channels that stay
//! quiet on clean data, on the hypothesis that they host the backdoor.

use ndarray::{s, Array1, Array4, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::models::Classifier;

/// Mixing rule for overlaying two images.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum BlendRule {
    /// `clamp(0.5 * x + 0.5 * overlay)`.
    #[default]
    HalfHalf,
}

/// Entropy-defense settings. Entropies are natural-log (nats).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StripConfig {
    pub n_overlays: usize,
    pub blend: BlendRule,
}

impl Default for StripConfig {
    fn default() -> Self {
        Self { n_overlays: 64, blend: BlendRule::HalfHalf }
    }
}

fn blend(x: &ndarray::ArrayView3<f32>, overlay: &ndarray::ArrayView3<f32>, rule: BlendRule) -> ndarray::Array3<f32> {
    match rule {
        BlendRule::HalfHalf => {
            let mut out = x.to_owned();
            ndarray::Zip::from(&mut out).and(overlay).for_each(|a, &o| {
                *a = (0.5 * *a + 0.5 * o).clamp(0.0, 1.0);
            });
            out
        }
    }
}

/// Shannon entropy (nats) of the softmax of one logit row.
fn softmax_entropy(logits: &[f32]) -> f64 {
    let max = logits.iter().copied().fold(f32::NEG_INFINITY, f32::max) as f64;
    let exps: Vec<f64> = logits.iter().map(|v| ((*v as f64) - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    -exps
        .iter()
        .map(|e| {
            let p = e / sum;
            if p > 0.0 {
                p * p.ln()
            } else {
                0.0
            }
        })
        .sum::<f64>()
}

/// Mean prediction entropy of one input under `cfg.n_overlays` random-clean
/// superpositions. Bounded by `[0, ln k]`.
pub fn strip_entropy(
    classifier: &mut Classifier,
    x: &ndarray::ArrayView3<f32>,
    overlays: &Array4<f32>,
    cfg: &StripConfig,
) -> Result<f64> {
    if overlays.dim().0 == 0 || cfg.n_overlays == 0 {
        return Err(Error::InvalidInput("entropy needs at least one overlay".into()));
    }
    let n = cfg.n_overlays.min(overlays.dim().0);
    let (c, h, w) = (x.dim().0, x.dim().1, x.dim().2);
    let mut batch = Array4::<f32>::zeros((n, c, h, w));
    for i in 0..n {
        let o = overlays.index_axis(Axis(0), i);
        batch.index_axis_mut(Axis(0), i).assign(&blend(x, &o, cfg.blend));
    }
    let logits = classifier.forward(&batch, false);
    let mut total = 0.0;
    for row in logits.outer_iter() {
        total += softmax_entropy(row.as_slice().unwrap());
    }
    Ok(total / n as f64)
}

/// Distributions and the separability statistic of the entropy defense.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StripReport {
    pub clean_entropies: Vec<f64>,
    pub backdoor_entropies: Vec<f64>,
    /// Fraction of backdoor entropies above the 1st percentile of the clean
    /// entropies: near 1.0 means an entropy threshold cannot separate the
    /// two populations without rejecting clean traffic.
    pub overlap: f64,
    /// Set when an input set is smaller than the recommended minimum.
    pub warning: Option<String>,
}

/// Nearest-rank percentile (q in [0, 1]) of an unsorted sample.
fn percentile(values: &[f64], q: f64) -> f64 {
    let mut sorted = values.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let rank = ((q * sorted.len() as f64).ceil() as usize).max(1) - 1;
    sorted[rank.min(sorted.len() - 1)]
}

/// Run the entropy defense over a clean and a backdoor image set.
pub fn strip_report(
    classifier: &mut Classifier,
    clean: &Array4<f32>,
    backdoor: &Array4<f32>,
    overlays: &Array4<f32>,
    cfg: &StripConfig,
) -> Result<StripReport> {
    let warning = if clean.dim().0 < 200 || backdoor.dim().0 < 200 {
        Some(format!(
            "input sets are small ({} clean, {} backdoor); distributions may be unstable",
            clean.dim().0,
            backdoor.dim().0
        ))
    } else {
        None
    };
    let entropies = |set: &Array4<f32>, clf: &mut Classifier| -> Result<Vec<f64>> {
        set.axis_iter(Axis(0))
            .map(|img| strip_entropy(clf, &img, overlays, cfg))
            .collect()
    };
    let clean_entropies = entropies(clean, classifier)?;
    let backdoor_entropies = entropies(backdoor, classifier)?;
    let p1 = percentile(&clean_entropies, 0.01);
    let above = backdoor_entropies.iter().filter(|e| **e > p1).count();
    let overlap = above as f64 / backdoor_entropies.len() as f64;
    Ok(StripReport { clean_entropies, backdoor_entropies, overlap, warning })
}

/// Pruning-sweep settings: fractions of final-conv channels to remove,
/// ascending.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PruneConfig {
    pub rates: Vec<f64>,
}

impl Default for PruneConfig {
    fn default() -> Self {
        Self { rates: (1..=9).map(|i| i as f64 / 10.0).collect() }
    }
}

impl PruneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.rates.iter().any(|r| !(0.0..1.0).contains(r)) {
            return Err(Error::InvalidInput(format!(
                "prune rates must lie in [0, 1), got {:?}",
                self.rates
            )));
        }
        if self.rates.windows(2).any(|w| w[0] > w[1]) {
            return Err(Error::InvalidInput("prune rates must be ascending".into()));
        }
        Ok(())
    }
}

/// Channels ordered by ascending mean activation magnitude.
///
/// Exposed separately so the ordering is directly testable against
/// hand-built activation tensors.
pub fn rank_by_mean_abs(activations: &Array1<f64>) -> Vec<usize> {
    let mut order: Vec<usize> = (0..activations.len()).collect();
    order.sort_by(|a, b| {
        activations[*a]
            .partial_cmp(&activations[*b])
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(b))
    });
    order
}

/// Mean |activation| per final-conv channel over a calibration set.
pub fn channel_activation_means(
    classifier: &mut Classifier,
    calibration: &Array4<f32>,
    batch_size: usize,
) -> Result<Array1<f64>> {
    let n = calibration.dim().0;
    if n == 0 {
        return Err(Error::InvalidInput("empty calibration set".into()));
    }
    let channels = classifier.final_conv_channels();
    let mut sums = Array1::<f64>::zeros(channels);
    let mut count = 0usize;
    let mut start = 0;
    while start < n {
        let end = (start + batch_size).min(n);
        let batch = calibration.slice(s![start..end, .., .., ..]).to_owned();
        let (_, act) = classifier.forward_capturing(&batch);
        for (ci, plane) in act.axis_iter(Axis(1)).enumerate() {
            sums[ci] += plane.iter().map(|v| v.abs() as f64).sum::<f64>();
        }
        count += (end - start) * act.dim().2 * act.dim().3;
        start = end;
    }
    Ok(sums.mapv(|s| s / count as f64))
}

/// Zero-mask the least-active channels at each rate; returns evaluable
/// pruned copies paired with their rates. Rate 0 returns the model
/// unchanged. Deterministic given the calibration data.
pub fn fine_prune(
    classifier: &Classifier,
    calibration: &Array4<f32>,
    cfg: &PruneConfig,
    batch_size: usize,
) -> Result<Vec<(f64, Classifier)>> {
    cfg.validate()?;
    let mut ranker = classifier.clone();
    let means = channel_activation_means(&mut ranker, calibration, batch_size)?;
    let order = rank_by_mean_abs(&means);
    let channels = classifier.final_conv_channels();

    let mut out = Vec::with_capacity(cfg.rates.len());
    for &rate in &cfg.rates {
        let n_prune = (rate * channels as f64).floor() as usize;
        let mut pruned = classifier.clone();
        if n_prune > 0 {
            let mut mask = vec![1.0f32; channels];
            for &ch in order.iter().take(n_prune) {
                mask[ch] = 0.0;
            }
            pruned.set_prune_mask(Some(mask))?;
        }
        out.push((rate, pruned));
    }
    Ok(out)
}
