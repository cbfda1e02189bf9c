//! Label encodings and target-set policies.
//!
//! A [`TargetSpec`] maps each ground-truth class to the set of classes a
//! triggered input is allowed to land in: every other class for the
//! full-range attack, or a small vicinity of the ground truth for the
//! narrow-range attack. [`EncodedLabel`] turns those sets into weight
//! vectors consumed by the loss functions, so both attack variants share a
//! single loss code path.

use std::collections::BTreeSet;

use crate::error::{Error, Result};

/// Which label positions carry weight.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EncodingMode {
    /// One-hot at the ground truth.
    Standard,
    /// Ones everywhere except the ground truth.
    FlippedFull,
    /// Ones on the target set only.
    FlippedNarrow,
}

/// Nonnegative weight vector over the k classes, derived from one label.
#[derive(Debug, Clone, PartialEq)]
pub struct EncodedLabel {
    weights: Vec<f64>,
    source_label: usize,
    mode: EncodingMode,
}

impl EncodedLabel {
    /// One-hot encoding of `y`.
    pub fn standard(k: usize, y: usize) -> Result<Self> {
        check_label(y, k)?;
        let mut weights = vec![0.0; k];
        weights[y] = 1.0;
        Ok(Self { weights, source_label: y, mode: EncodingMode::Standard })
    }

    /// Escape hatch for tests and loss-level callers that need a hand-built
    /// weight vector; mode is reported as [`EncodingMode::FlippedNarrow`].
    pub fn from_raw(weights: Vec<f64>, source_label: usize) -> Self {
        Self { weights, source_label, mode: EncodingMode::FlippedNarrow }
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn source_label(&self) -> usize {
        self.source_label
    }

    pub fn mode(&self) -> EncodingMode {
        self.mode
    }
}

/// How the narrow-range attack picks the vicinity of a class.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VicinityPolicy {
    /// `S(y) = {(y+1) mod k, ..., (y+m) mod k}`: deterministic, label-only,
    /// and guarantees every class is reachable from some source class.
    CyclicSuccessor,
    /// The m classes most similar to `y` under a supplied class-similarity
    /// matrix (row-major, k*k). Ties break by class index.
    ConfusionNeighbor { similarity: Vec<Vec<f64>> },
}

/// Attack variant selector.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttackMode {
    /// Misclassify into any class except the ground truth.
    FullRange,
    /// Misclassify into an m-element set near the ground truth.
    NarrowRange { m: usize },
}

/// Attack mode plus the vicinity policy mapping each label to its target set.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct TargetSpec {
    mode: AttackMode,
    policy: VicinityPolicy,
    k: usize,
}

impl TargetSpec {
    pub fn new(mode: AttackMode, policy: VicinityPolicy, k: usize) -> Result<Self> {
        if k < 2 {
            return Err(Error::InvalidSpec(format!("need at least 2 classes, got {k}")));
        }
        if let AttackMode::NarrowRange { m } = mode {
            if m == 0 || m > k - 1 {
                return Err(Error::InvalidSpec(format!(
                    "narrow-range size m={m} must satisfy 1 <= m <= k-1 (k={k})"
                )));
            }
        }
        if let VicinityPolicy::ConfusionNeighbor { similarity } = &policy {
            if similarity.len() != k || similarity.iter().any(|row| row.len() != k) {
                return Err(Error::InvalidSpec(format!(
                    "similarity matrix must be {k}x{k}"
                )));
            }
        }
        Ok(Self { mode, policy, k })
    }

    pub fn mode(&self) -> AttackMode {
        self.mode
    }

    pub fn class_count(&self) -> usize {
        self.k
    }

    pub fn policy(&self) -> &VicinityPolicy {
        &self.policy
    }

    /// The target set `S(y)`; never contains `y`, deterministic for a fixed
    /// spec.
    pub fn target_set(&self, y: usize) -> Result<BTreeSet<usize>> {
        check_label(y, self.k)?;
        match self.mode {
            AttackMode::FullRange => Ok((0..self.k).filter(|t| *t != y).collect()),
            AttackMode::NarrowRange { m } => match &self.policy {
                VicinityPolicy::CyclicSuccessor => {
                    Ok((1..=m).map(|i| (y + i) % self.k).collect())
                }
                VicinityPolicy::ConfusionNeighbor { similarity } => {
                    let mut others: Vec<usize> = (0..self.k).filter(|t| *t != y).collect();
                    others.sort_by(|a, b| {
                        similarity[y][*b]
                            .partial_cmp(&similarity[y][*a])
                            .unwrap_or(std::cmp::Ordering::Equal)
                            .then(a.cmp(b))
                    });
                    Ok(others.into_iter().take(m).collect())
                }
            },
        }
    }

    /// Union of all per-label target sets; the class set the dispersibility
    /// score is computed over.
    pub fn target_universe(&self) -> BTreeSet<usize> {
        match self.mode {
            AttackMode::FullRange => (0..self.k).collect(),
            AttackMode::NarrowRange { .. } => {
                let mut u = BTreeSet::new();
                for y in 0..self.k {
                    // target_set cannot fail for y < k
                    u.extend(self.target_set(y).expect("valid label"));
                }
                u
            }
        }
    }

    /// Flipped encoding of `y` under this spec: weight 1 on each target
    /// class, 0 elsewhere (in particular 0 at `y`).
    pub fn encode(&self, y: usize) -> Result<EncodedLabel> {
        let set = self.target_set(y)?;
        let mut weights = vec![0.0; self.k];
        for t in &set {
            weights[*t] = 1.0;
        }
        let mode = match self.mode {
            AttackMode::FullRange => EncodingMode::FlippedFull,
            AttackMode::NarrowRange { .. } => EncodingMode::FlippedNarrow,
        };
        Ok(EncodedLabel { weights, source_label: y, mode })
    }
}

fn check_label(y: usize, k: usize) -> Result<()> {
    if y >= k {
        return Err(Error::InvalidLabel { label: y, k });
    }
    Ok(())
}
