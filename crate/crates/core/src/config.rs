//! Experiment configuration: a strict, schema-versioned TOML file that
//! resolves into the typed configs the pipeline consumes.
//!
//! Unknown keys are rejected, every violation is reported (not just the
//! first), and the provenance hash is computed over the parsed, resolved
//! form, so cosmetic reordering of keys leaves the hash unchanged.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::DatasetId;
use crate::defenses::{PruneConfig, StripConfig};
use crate::error::{Error, Result};
use crate::losses::{LossWeights, NormalizationConfig};
use crate::models::ArchId;
use crate::targets::{AttackMode, TargetSpec, VicinityPolicy};
use crate::training::{LossMode, OptimizerKind, TrainConfig, TriggerSettings};

pub use crate::training::stable_hash;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub schema_version: u32,
    pub experiment: ExperimentSection,
    pub data: DataSection,
    pub model: ModelSection,
    pub attack: AttackSection,
    #[serde(default)]
    pub loss: LossSection,
    pub train: TrainSection,
    #[serde(default)]
    pub trigger: TriggerSection,
    #[serde(default)]
    pub strip: StripSection,
    #[serde(default)]
    pub prune: PruneSection,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentSection {
    pub name: String,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSection {
    pub dataset: String,
    #[serde(default = "default_val_size")]
    pub val_size: usize,
    /// Overrides the cache root (else `BACKSCATTER_DATA_DIR` or `./data`).
    #[serde(default)]
    pub cache_dir: Option<PathBuf>,
}

fn default_val_size() -> usize {
    2000
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    pub arch: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttackSection {
    /// "none" | "full_range" | "narrow_range" | "naive_flip"
    pub mode: String,
    #[serde(default)]
    pub m: Option<usize>,
    /// "cyclic" | "confusion"
    #[serde(default = "default_vicinity")]
    pub vicinity: String,
    #[serde(default)]
    pub similarity_path: Option<PathBuf>,
}

fn default_vicinity() -> String {
    "cyclic".into()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossSection {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    pub tau: f64,
    pub epsilon: f64,
}

impl Default for LossSection {
    fn default() -> Self {
        let w = LossWeights::default();
        let n = NormalizationConfig::default();
        Self { alpha: w.alpha, beta: w.beta, gamma: w.gamma, tau: n.tau, epsilon: n.epsilon }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSection {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    #[serde(default = "default_optimizer")]
    pub optimizer: String,
    #[serde(default = "default_momentum")]
    pub momentum: f32,
    #[serde(default)]
    pub weight_decay: f32,
    #[serde(default)]
    pub cosine_decay: bool,
    #[serde(default = "default_poison_ratio")]
    pub poison_ratio: f64,
    /// 0 means the full training split.
    #[serde(default)]
    pub train_subset: usize,
}

fn default_optimizer() -> String {
    "adam".into()
}

fn default_momentum() -> f32 {
    0.9
}

fn default_poison_ratio() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TriggerSection {
    pub base_channels: usize,
    pub residual_scale: f32,
}

impl Default for TriggerSection {
    fn default() -> Self {
        let t = TriggerSettings::default();
        Self { base_channels: t.base_channels, residual_scale: t.residual_scale }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StripSection {
    pub n_overlays: usize,
    /// Samples drawn from each of the clean and backdoor pools.
    pub sample_size: usize,
}

impl Default for StripSection {
    fn default() -> Self {
        Self { n_overlays: StripConfig::default().n_overlays, sample_size: 1000 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PruneSection {
    pub rates: Vec<f64>,
    /// Clean calibration samples for activation ranking.
    pub calibration_size: usize,
}

impl Default for PruneSection {
    fn default() -> Self {
        Self { rates: PruneConfig::default().rates, calibration_size: 2000 }
    }
}

impl ExperimentConfig {
    /// Parse and fully validate a TOML config file.
    pub fn from_path(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::InvalidConfig(vec![format!("cannot read {}: {e}", path.display())]))?;
        Self::from_toml(&text)
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let parsed: ExperimentConfig = toml::from_str(text)
            .map_err(|e| Error::InvalidConfig(vec![format!("toml: {e}")]))?;
        parsed.validate()?;
        Ok(parsed)
    }

    /// Stable provenance hash of the resolved config.
    pub fn hash(&self) -> String {
        stable_hash(self)
    }

    pub fn dataset(&self) -> Result<DatasetId> {
        self.data.dataset.parse()
    }

    /// Cache root precedence: config file, then `BACKSCATTER_DATA_DIR`, then
    /// `./data`.
    pub fn cache_root(&self) -> PathBuf {
        if let Some(dir) = &self.data.cache_dir {
            return dir.clone();
        }
        std::env::var("BACKSCATTER_DATA_DIR")
            .map(PathBuf::from)
            .unwrap_or_else(|_| PathBuf::from("data"))
    }

    /// Collect every schema violation.
    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        if self.schema_version != 1 {
            problems.push(format!("unsupported schema_version {}", self.schema_version));
        }
        if self.experiment.name.is_empty() {
            problems.push("experiment.name must not be empty".into());
        }
        let dataset: Option<DatasetId> = match self.data.dataset.parse() {
            Ok(d) => Some(d),
            Err(e) => {
                problems.push(e.to_string());
                None
            }
        };
        if self.model.arch.parse::<ArchId>().is_err() {
            problems.push(format!("unknown model.arch '{}'", self.model.arch));
        }
        match self.attack.mode.as_str() {
            "none" | "full_range" | "naive_flip" => {}
            "narrow_range" => {
                match (self.attack.m, dataset) {
                    (None, _) => problems.push("narrow_range requires attack.m".into()),
                    (Some(m), Some(d)) if m == 0 || m >= d.class_count() => problems.push(
                        format!("attack.m = {m} out of range for {} classes", d.class_count()),
                    ),
                    _ => {}
                }
                if self.attack.vicinity == "confusion" && self.attack.similarity_path.is_none() {
                    problems
                        .push("confusion vicinity requires attack.similarity_path".into());
                }
            }
            other => problems.push(format!("unknown attack.mode '{other}'")),
        }
        if !matches!(self.attack.vicinity.as_str(), "cyclic" | "confusion") {
            problems.push(format!("unknown attack.vicinity '{}'", self.attack.vicinity));
        }
        if LossWeights::new(self.loss.alpha, self.loss.beta, self.loss.gamma).is_err() {
            problems.push(format!(
                "invalid loss weights ({}, {}, {})",
                self.loss.alpha, self.loss.beta, self.loss.gamma
            ));
        }
        if NormalizationConfig::new(self.loss.tau, self.loss.epsilon).is_err() {
            problems.push(format!(
                "invalid normalization (tau {}, epsilon {})",
                self.loss.tau, self.loss.epsilon
            ));
        }
        if self.train.epochs == 0 {
            problems.push("train.epochs must be >= 1".into());
        }
        if self.train.batch_size < 2 {
            problems.push("train.batch_size must be >= 2".into());
        }
        if !(self.train.lr > 0.0) {
            problems.push("train.lr must be > 0".into());
        }
        if !matches!(self.train.optimizer.as_str(), "adam" | "sgd") {
            problems.push(format!("unknown train.optimizer '{}'", self.train.optimizer));
        }
        if !(0.0..=1.0).contains(&self.train.poison_ratio) {
            problems.push("train.poison_ratio must be in [0, 1]".into());
        }
        if self.trigger.base_channels == 0 {
            problems.push("trigger.base_channels must be >= 1".into());
        }
        if !(self.trigger.residual_scale > 0.0 && self.trigger.residual_scale <= 1.0) {
            problems.push("trigger.residual_scale must be in (0, 1]".into());
        }
        if self.strip.n_overlays == 0 {
            problems.push("strip.n_overlays must be >= 1".into());
        }
        if let Err(e) = (PruneConfig { rates: self.prune.rates.clone() }).validate() {
            problems.push(e.to_string());
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::InvalidConfig(problems))
        }
    }

    fn vicinity_policy(&self) -> Result<VicinityPolicy> {
        match self.attack.vicinity.as_str() {
            "cyclic" => Ok(VicinityPolicy::CyclicSuccessor),
            "confusion" => {
                let path = self.attack.similarity_path.as_ref().ok_or_else(|| {
                    Error::InvalidConfig(vec!["confusion vicinity requires similarity_path".into()])
                })?;
                let text = std::fs::read_to_string(path).map_err(|e| {
                    Error::InvalidConfig(vec![format!(
                        "cannot read similarity matrix {}: {e}",
                        path.display()
                    )])
                })?;
                let similarity = parse_similarity_csv(&text)?;
                Ok(VicinityPolicy::ConfusionNeighbor { similarity })
            }
            other => Err(Error::InvalidConfig(vec![format!("unknown vicinity '{other}'")])),
        }
    }

    /// Resolve the target spec, if the attack mode defines one.
    pub fn target_spec(&self) -> Result<Option<TargetSpec>> {
        let dataset: DatasetId = self.dataset()?;
        let k = dataset.class_count();
        match self.attack.mode.as_str() {
            "none" => Ok(None),
            "full_range" | "naive_flip" => Ok(Some(TargetSpec::new(
                AttackMode::FullRange,
                self.vicinity_policy()?,
                k,
            )?)),
            "narrow_range" => {
                let m = self.attack.m.ok_or_else(|| {
                    Error::InvalidConfig(vec!["narrow_range requires attack.m".into()])
                })?;
                Ok(Some(TargetSpec::new(
                    AttackMode::NarrowRange { m },
                    self.vicinity_policy()?,
                    k,
                )?))
            }
            other => Err(Error::InvalidConfig(vec![format!("unknown attack mode '{other}'")])),
        }
    }

    /// Resolve into the typed training configuration.
    pub fn to_train_config(&self) -> Result<TrainConfig> {
        self.validate()?;
        let loss_mode = match self.attack.mode.as_str() {
            "none" => LossMode::Clean,
            "naive_flip" => LossMode::NaiveFlip,
            _ => LossMode::LognormFlip,
        };
        let optimizer = match self.train.optimizer.as_str() {
            "adam" => OptimizerKind::Adam,
            _ => OptimizerKind::SgdMomentum {
                momentum: self.train.momentum,
                weight_decay: self.train.weight_decay,
                cosine_decay: self.train.cosine_decay,
            },
        };
        let config = TrainConfig {
            dataset: self.dataset()?,
            arch: self.model.arch.parse()?,
            loss_mode,
            target: self.target_spec()?,
            weights: LossWeights::new(self.loss.alpha, self.loss.beta, self.loss.gamma)?,
            normalization: NormalizationConfig::new(self.loss.tau, self.loss.epsilon)?,
            epochs: self.train.epochs,
            batch_size: self.train.batch_size,
            lr: self.train.lr,
            optimizer,
            seed: self.experiment.seed,
            poison_ratio: self.train.poison_ratio,
            val_size: self.data.val_size,
            trigger: TriggerSettings {
                base_channels: self.trigger.base_channels,
                residual_scale: self.trigger.residual_scale,
            },
            train_subset: if self.train.train_subset == 0 {
                None
            } else {
                Some(self.train.train_subset)
            },
        };
        config.validate()?;
        Ok(config)
    }

    pub fn strip_config(&self) -> StripConfig {
        StripConfig { n_overlays: self.strip.n_overlays, ..Default::default() }
    }

    pub fn prune_config(&self) -> PruneConfig {
        PruneConfig { rates: self.prune.rates.clone() }
    }
}

/// Parse a comma-separated k x k similarity matrix.
fn parse_similarity_csv(text: &str) -> Result<Vec<Vec<f64>>> {
    let mut rows = Vec::new();
    for line in text.lines() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let row: std::result::Result<Vec<f64>, _> =
            line.split(',').map(|c| c.trim().parse::<f64>()).collect();
        rows.push(row.map_err(|e| {
            Error::InvalidConfig(vec![format!("similarity matrix parse error: {e}")])
        })?);
    }
    let k = rows.len();
    if k == 0 || rows.iter().any(|r| r.len() != k) {
        return Err(Error::InvalidConfig(vec![format!(
            "similarity matrix must be square and non-empty"
        )]));
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    const GOOD: &str = r#"
schema_version = 1

[experiment]
name = "mnist_fra"
seed = 42

[data]
dataset = "mnist"
val_size = 2000

[model]
arch = "simple_cnn"

[attack]
mode = "full_range"

[train]
epochs = 20
batch_size = 128
lr = 0.001
"#;

    #[test]
    fn good_config_parses_and_resolves() {
        let cfg = ExperimentConfig::from_toml(GOOD).unwrap();
        let train = cfg.to_train_config().unwrap();
        assert_eq!(train.dataset, DatasetId::Mnist);
        assert_eq!(train.loss_mode, LossMode::LognormFlip);
        assert_eq!(train.weights, LossWeights::default());
        assert_eq!(train.epochs, 20);
        assert!(train.target.is_some());
    }

    #[test]
    fn unknown_keys_rejected() {
        let bad = GOOD.replace("[train]", "[train]\nturbo_mode = true");
        let err = ExperimentConfig::from_toml(&bad).unwrap_err();
        assert!(err.to_string().contains("turbo_mode"), "{err}");
    }

    #[test]
    fn violations_are_collected_exhaustively() {
        let bad = GOOD
            .replace("dataset = \"mnist\"", "dataset = \"imagenet\"")
            .replace("arch = \"simple_cnn\"", "arch = \"mlp\"")
            .replace("epochs = 20", "epochs = 0")
            .replace("lr = 0.001", "lr = 0.0");
        match ExperimentConfig::from_toml(&bad) {
            Err(Error::InvalidConfig(problems)) => {
                assert!(problems.len() >= 4, "{problems:?}");
            }
            other => panic!("expected config error, got {other:?}"),
        }
    }

    #[test]
    fn hash_is_stable_under_key_reordering() {
        let reordered = r#"
schema_version = 1

[experiment]
seed = 42
name = "mnist_fra"

[model]
arch = "simple_cnn"

[data]
val_size = 2000
dataset = "mnist"

[attack]
mode = "full_range"

[train]
lr = 0.001
batch_size = 128
epochs = 20
"#;
        let a = ExperimentConfig::from_toml(GOOD).unwrap();
        let b = ExperimentConfig::from_toml(reordered).unwrap();
        assert_eq!(a.hash(), b.hash());

        let c = ExperimentConfig::from_toml(&GOOD.replace("seed = 42", "seed = 43")).unwrap();
        assert_ne!(a.hash(), c.hash());
    }

    #[test]
    fn narrow_range_requires_m() {
        let bad = GOOD.replace("mode = \"full_range\"", "mode = \"narrow_range\"");
        assert!(ExperimentConfig::from_toml(&bad).is_err());
        let good = GOOD.replace("mode = \"full_range\"", "mode = \"narrow_range\"\nm = 2");
        let cfg = ExperimentConfig::from_toml(&good).unwrap();
        let spec = cfg.target_spec().unwrap().unwrap();
        assert_eq!(spec.target_set(0).unwrap().len(), 2);
    }

    #[test]
    fn naive_flip_maps_to_baseline_loss() {
        let cfg = ExperimentConfig::from_toml(
            &GOOD.replace("mode = \"full_range\"", "mode = \"naive_flip\""),
        )
        .unwrap();
        assert_eq!(cfg.to_train_config().unwrap().loss_mode, LossMode::NaiveFlip);
    }

    #[test]
    fn similarity_matrix_parses() {
        let m = parse_similarity_csv("1.0, 0.2\n0.2, 1.0").unwrap();
        assert_eq!(m.len(), 2);
        assert!(parse_similarity_csv("1.0, 0.2\n0.2").is_err());
        assert!(parse_similarity_csv("").is_err());
    }
}
