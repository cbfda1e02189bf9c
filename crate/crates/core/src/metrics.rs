//! Attack evaluation metrics: attack success rate, dispersibility score,
//! clean accuracy, and the assembled evaluation report.
//!
//! The dispersibility score measures how evenly successful attacks spread
//! over the target classes: 1 means perfectly uniform, and it cannot drop
//! below the analytic floor reached when every success lands in one class.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::targets::{AttackMode, TargetSpec};

/// One evaluated sample: ground truth, prediction, and (for triggered
/// samples) the target set the prediction must fall in to count as success.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PredictionRecord {
    pub true_label: usize,
    pub predicted: usize,
    pub is_backdoor: bool,
    /// `S(y)` for backdoor records; `None` for clean records.
    pub target_set: Option<BTreeSet<usize>>,
}

impl PredictionRecord {
    /// Record for a clean (untriggered) sample.
    pub fn clean(true_label: usize, predicted: usize) -> Self {
        Self { true_label, predicted, is_backdoor: false, target_set: None }
    }

    /// Record for a triggered sample, deriving the success set from `spec`.
    pub fn backdoor(true_label: usize, predicted: usize, spec: &TargetSpec) -> Result<Self> {
        Ok(Self {
            true_label,
            predicted,
            is_backdoor: true,
            target_set: Some(spec.target_set(true_label)?),
        })
    }

    fn is_success(&self) -> bool {
        match &self.target_set {
            Some(set) => set.contains(&self.predicted),
            // full-range semantics if no set was attached
            None => self.predicted != self.true_label,
        }
    }
}

/// Fraction of backdoor records whose prediction satisfies the success rule:
/// any class but the ground truth for the full-range attack, membership in
/// `S(y)` for the narrow-range attack.
pub fn attack_success_rate(records: &[PredictionRecord]) -> Result<f64> {
    let backdoor: Vec<&PredictionRecord> = records.iter().filter(|r| r.is_backdoor).collect();
    if backdoor.is_empty() {
        return Err(Error::UndefinedMetric("attack success rate over zero backdoor records".into()));
    }
    let hits = backdoor.iter().filter(|r| r.is_success()).count();
    Ok(hits as f64 / backdoor.len() as f64)
}

/// Fraction of clean records predicted correctly.
pub fn clean_accuracy(records: &[PredictionRecord]) -> Result<f64> {
    let clean: Vec<&PredictionRecord> = records.iter().filter(|r| !r.is_backdoor).collect();
    if clean.is_empty() {
        return Err(Error::UndefinedMetric("clean accuracy over zero clean records".into()));
    }
    let hits = clean.iter().filter(|r| r.predicted == r.true_label).count();
    Ok(hits as f64 / clean.len() as f64)
}

/// Dispersibility score of a success histogram over the target-class set.
///
/// `counts[j]` is the number of successful attacks that landed in the j-th
/// target class (zeros included). With `p_j = counts_j / total`:
///
/// `DS = 1 - sqrt( sum_j (p_j - 1/H)^2 / H )`
///
/// Requires at least two target classes and at least one success.
pub fn dispersibility_score(counts: &[u64]) -> Result<f64> {
    let h = counts.len();
    if h < 2 {
        return Err(Error::UndefinedMetric(format!(
            "dispersibility needs at least 2 target classes, got {h}"
        )));
    }
    let total: u64 = counts.iter().sum();
    if total == 0 {
        return Err(Error::UndefinedMetric("dispersibility over zero successes".into()));
    }
    let uniform = 1.0 / h as f64;
    let var = counts
        .iter()
        .map(|c| {
            let p = *c as f64 / total as f64;
            (p - uniform) * (p - uniform)
        })
        .sum::<f64>()
        / h as f64;
    Ok(1.0 - var.sqrt())
}

/// The dispersibility score of a fully concentrated histogram:
/// `1 - sqrt(H-1)/H`, the lowest value the score can take over H classes.
pub fn ds_floor(h: usize) -> Result<f64> {
    if h < 2 {
        return Err(Error::UndefinedMetric(format!("ds floor needs H >= 2, got {h}")));
    }
    Ok(1.0 - ((h - 1) as f64).sqrt() / h as f64)
}

/// Spearman rank correlation with average ranks on ties.
///
/// Used to quantify co-degradation of two metric sequences across a pruning
/// sweep; defined for sequences of equal length >= 2.
pub fn spearman_rank_correlation(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() || a.len() < 2 {
        return Err(Error::UndefinedMetric(format!(
            "spearman needs two equal-length sequences of >= 2 values, got {} and {}",
            a.len(),
            b.len()
        )));
    }
    let ra = average_ranks(a);
    let rb = average_ranks(b);
    let n = a.len() as f64;
    let mean = (n + 1.0) / 2.0;
    let mut num = 0.0;
    let mut da = 0.0;
    let mut db = 0.0;
    for i in 0..a.len() {
        num += (ra[i] - mean) * (rb[i] - mean);
        da += (ra[i] - mean) * (ra[i] - mean);
        db += (rb[i] - mean) * (rb[i] - mean);
    }
    if da == 0.0 || db == 0.0 {
        return Err(Error::UndefinedMetric("spearman undefined for constant sequence".into()));
    }
    Ok(num / (da * db).sqrt())
}

fn average_ranks(v: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|i, j| v[*i].partial_cmp(&v[*j]).unwrap_or(std::cmp::Ordering::Equal));
    let mut ranks = vec![0.0; v.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for r in idx.iter().take(j + 1).skip(i) {
            ranks[*r] = avg;
        }
        i = j + 1;
    }
    ranks
}

/// Per-source-class dominant share: for each ground-truth class, the largest
/// fraction of its successful attacks absorbed by a single predicted class.
/// Diagnoses collapse of an untargeted attack into a targeted one.
pub fn dominant_class_shares(records: &[PredictionRecord]) -> BTreeMap<usize, f64> {
    let mut per_source: BTreeMap<usize, BTreeMap<usize, u64>> = BTreeMap::new();
    for r in records.iter().filter(|r| r.is_backdoor && r.is_success()) {
        *per_source.entry(r.true_label).or_default().entry(r.predicted).or_default() += 1;
    }
    per_source
        .into_iter()
        .map(|(y, hist)| {
            let total: u64 = hist.values().sum();
            let max = hist.values().copied().max().unwrap_or(0);
            (y, max as f64 / total as f64)
        })
        .collect()
}

/// Aggregated evaluation of one checkpoint on one split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    /// Attack success rate over backdoor samples.
    pub asr: f64,
    /// Dispersibility score; absent when there were no successful attacks
    /// (never reported as 0).
    pub ds: Option<f64>,
    /// Clean accuracy.
    pub ca: f64,
    /// Successful-attack counts per predicted class, over the union of all
    /// target sets (zero-count classes included).
    pub histogram: BTreeMap<usize, u64>,
    /// Largest per-pixel |backdoor - clean| observed, if measured.
    pub residual_linf: Option<f64>,
    /// Mean per-image MSE between backdoor and clean images, if measured.
    pub residual_mse: Option<f64>,
    pub config_hash: String,
    pub seed: u64,
    pub clean_count: usize,
    pub backdoor_count: usize,
    pub success_count: usize,
    pub class_count: usize,
    pub attack: String,
}

impl EvalReport {
    /// Recompute the dispersibility score from the embedded histogram; used
    /// to check report self-consistency.
    pub fn ds_from_histogram(&self) -> Result<f64> {
        let counts: Vec<u64> = self.histogram.values().copied().collect();
        dispersibility_score(&counts)
    }
}

/// Residual statistics measured on a batch of (clean, backdoor) image pairs.
#[derive(Debug, Clone, Copy, Default)]
pub struct ResidualStats {
    pub linf: f64,
    pub mse: f64,
}

/// Assemble the full report from clean and backdoor record sets.
///
/// The histogram covers `H`, the union of target sets (all classes for the
/// full-range attack); predictions equal to the ground truth never count,
/// because no target set contains its own source label.
pub fn build_report(
    clean: &[PredictionRecord],
    backdoor: &[PredictionRecord],
    spec: &TargetSpec,
    residual: Option<ResidualStats>,
    config_hash: &str,
    seed: u64,
) -> Result<EvalReport> {
    let ca = clean_accuracy(clean)?;
    let asr = attack_success_rate(backdoor)?;

    let universe = spec.target_universe();
    let mut histogram: BTreeMap<usize, u64> = universe.iter().map(|c| (*c, 0)).collect();
    let mut success_count = 0usize;
    for r in backdoor.iter().filter(|r| r.is_backdoor && r.is_success()) {
        *histogram.get_mut(&r.predicted).ok_or_else(|| {
            Error::InvalidInput(format!(
                "successful prediction {} outside the target universe",
                r.predicted
            ))
        })? += 1;
        success_count += 1;
    }
    let ds = if success_count == 0 {
        None
    } else {
        let counts: Vec<u64> = histogram.values().copied().collect();
        Some(dispersibility_score(&counts)?)
    };

    let attack = match spec.mode() {
        AttackMode::FullRange => "full_range".to_string(),
        AttackMode::NarrowRange { m } => format!("narrow_range_{m}"),
    };

    Ok(EvalReport {
        asr,
        ds,
        ca,
        histogram,
        residual_linf: residual.map(|r| r.linf),
        residual_mse: residual.map(|r| r.mse),
        config_hash: config_hash.to_string(),
        seed,
        clean_count: clean.iter().filter(|r| !r.is_backdoor).count(),
        backdoor_count: backdoor.iter().filter(|r| r.is_backdoor).count(),
        success_count,
        class_count: spec.class_count(),
        attack,
    })
}
