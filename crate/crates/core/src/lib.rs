//! Controlled untargeted backdoor attacks on image classifiers.
//!
//! This crate trains a classifier jointly with a learned image-to-image
//! trigger generator so that triggered inputs are misclassified into a
//! *random* class drawn (near-uniformly) from an attacker-chosen target set,
//! while clean accuracy is preserved. The randomization is obtained by
//! normalizing logits before a flipped-label cross-entropy, which stops the
//! optimizer from concentrating all triggered predictions in one class.
//!
//! The crate also ships the measurement side: attack success rate,
//! dispersibility score (with its analytic floor), a naive flipped-label
//! baseline that demonstrates collapse into a targeted attack, and
//! resistance harnesses for entropy-based trigger detection and
//! fine-pruning.

pub mod baseline;
pub mod config;
pub mod data;
pub mod defenses;
pub mod error;
pub mod nn;
pub mod losses;
pub mod metrics;
pub mod models;
pub mod targets;
pub mod training;
pub mod trigger;

pub use error::{Error, Result};
