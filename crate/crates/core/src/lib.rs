//! Long-tailed semi-supervised learning with a shared-backbone teacher/student
//! network.
//!
//! A FixMatch teacher head and a student head share one feature extractor. The
//! student is trained with distribution-aware cross-entropy on labeled data
//! and imitates the teacher's pseudo-label distribution after a logit
//! transformation that flattens head-biased predictions, scaled per example by
//! `τ(ŷ) = A·α_ŷ + B` with `α = softmax(−log π)`. Inference uses the student.
//!
//! Modules:
//! - [`losses`]: prior, softmax, CE / DA-CE / KL and the teacher transformation.
//! - [`model`]: MLP backbone, two heads, forward and manual backward.
//! - [`data`]: long-tailed count profiles, synthetic mixtures, augmentation, CSV.
//! - [`optim`]: Adam and weight EMA.
//! - [`trainer`]: loss assembly, warmup, training modes and logs.
//! - [`metrics`]: accuracy, GM, confusion, pseudo-label quality, balancedness.
//! - [`experiment`]: config files, experiment runs, the (A, B) sweep and checkpoints.

// `!(x >= 0.0)` style checks are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod data;
pub mod error;
pub mod experiment;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod trainer;

pub use error::{Result, TrasError};
