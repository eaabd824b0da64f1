//! Per-example loss primitives: class prior, softmax, cross-entropy,
//! distribution-aware cross-entropy, KL divergence and the teacher-logit
//! transformation with its pseudo-label dependent scale.
//!
//! Everything here is a pure function of its inputs and works in natural log.
//! Logit and probability vectors are plain `&[f64]` slices of length `L`.

use serde::{Deserialize, Serialize};

use crate::error::{Result, TrasError};

/// Lower clamp applied to the second argument of [`kl_div`].
pub const KL_EPS: f64 = 1e-12;

/// Per-class counts and the normalized prior derived from them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassPrior {
    counts: Vec<u64>,
    probs: Vec<f64>,
    log_probs: Vec<f64>,
}

impl ClassPrior {
    /// Builds `π_l = (count_l + smoothing) / (N + L·smoothing)`.
    pub fn from_counts(counts: &[u64], smoothing: f64) -> Result<Self> {
        if counts.len() < 2 {
            return Err(TrasError::InvalidArgument(format!(
                "a class prior needs at least 2 classes, got {}",
                counts.len()
            )));
        }
        if !(smoothing >= 0.0) || !smoothing.is_finite() {
            return Err(TrasError::InvalidArgument(format!(
                "smoothing must be a finite value >= 0, got {smoothing}"
            )));
        }
        if smoothing == 0.0 {
            if let Some(class) = counts.iter().position(|&c| c == 0) {
                return Err(TrasError::DegeneratePrior { class });
            }
        }
        let total: f64 = counts.iter().map(|&c| c as f64).sum::<f64>() + smoothing * counts.len() as f64;
        let probs: Vec<f64> = counts.iter().map(|&c| (c as f64 + smoothing) / total).collect();
        let log_probs = probs.iter().map(|p| p.ln()).collect();
        Ok(Self {
            counts: counts.to_vec(),
            probs,
            log_probs,
        })
    }

    /// Prior from known probabilities (e.g. ground truth). Values are renormalized.
    pub fn from_probs(probs: &[f64]) -> Result<Self> {
        if probs.len() < 2 {
            return Err(TrasError::InvalidArgument("a class prior needs at least 2 classes".into()));
        }
        if let Some(class) = probs.iter().position(|&p| !(p > 0.0) || !p.is_finite()) {
            return Err(TrasError::DegeneratePrior { class });
        }
        let total: f64 = probs.iter().sum();
        let probs: Vec<f64> = probs.iter().map(|p| p / total).collect();
        let log_probs = probs.iter().map(|p| p.ln()).collect();
        Ok(Self {
            counts: Vec::new(),
            probs,
            log_probs,
        })
    }

    pub fn num_classes(&self) -> usize {
        self.probs.len()
    }

    /// Raw counts; empty when built from probabilities.
    pub fn counts(&self) -> &[u64] {
        &self.counts
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn log_probs(&self) -> &[f64] {
        &self.log_probs
    }
}

/// Counts labels per class and builds the prior from those counts.
pub fn estimate_class_prior(labels: &[usize], num_classes: usize, smoothing: f64) -> Result<ClassPrior> {
    if num_classes < 2 {
        return Err(TrasError::InvalidArgument(format!(
            "num_classes must be >= 2, got {num_classes}"
        )));
    }
    let mut counts = vec![0u64; num_classes];
    for &y in labels {
        if y >= num_classes {
            return Err(TrasError::InvalidArgument(format!(
                "label {y} out of range for {num_classes} classes"
            )));
        }
        counts[y] += 1;
    }
    ClassPrior::from_counts(&counts, smoothing)
}

fn max_of(z: &[f64]) -> f64 {
    z.iter().copied().fold(f64::NEG_INFINITY, f64::max)
}

/// Numerically stable softmax (max-subtracted).
pub fn softmax(z: &[f64]) -> Vec<f64> {
    let m = max_of(z);
    let mut out: Vec<f64> = z.iter().map(|&v| (v - m).exp()).collect();
    let s: f64 = out.iter().sum();
    out.iter_mut().for_each(|v| *v /= s);
    out
}

/// Numerically stable log-softmax.
pub fn log_softmax(z: &[f64]) -> Vec<f64> {
    let m = max_of(z);
    let lse = m + z.iter().map(|&v| (v - m).exp()).sum::<f64>().ln();
    z.iter().map(|&v| v - lse).collect()
}

/// Index of the largest entry; ties resolve to the lowest index.
pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate().skip(1) {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// `−log softmax(z)[y]`.
pub fn ce_loss(y: usize, z: &[f64]) -> f64 {
    -log_softmax(z)[y]
}

/// Gradient of [`ce_loss`] with respect to the logits: `softmax(z) − e_y`.
pub fn ce_grad(y: usize, z: &[f64]) -> Vec<f64> {
    let mut g = softmax(z);
    g[y] -= 1.0;
    g
}

/// `z + scale · log π`, elementwise.
pub fn shift_by_log_prior(z: &[f64], prior: &ClassPrior, scale: f64) -> Vec<f64> {
    z.iter()
        .zip(prior.log_probs())
        .map(|(&v, &lp)| v + scale * lp)
        .collect()
}

/// Distribution-aware cross-entropy: CE on logits shifted by `+tau · log π`.
pub fn da_ce_loss(y: usize, z: &[f64], prior: &ClassPrior, tau: f64) -> f64 {
    ce_loss(y, &shift_by_log_prior(z, prior, tau))
}

/// Gradient of [`da_ce_loss`] with respect to the unshifted logits.
pub fn da_ce_grad(y: usize, z: &[f64], prior: &ClassPrior, tau: f64) -> Vec<f64> {
    ce_grad(y, &shift_by_log_prior(z, prior, tau))
}

/// `Σ p_l log(p_l / q_l)` with `q` clamped at [`KL_EPS`] and `0·log 0 = 0`.
pub fn kl_div(p: &[f64], q: &[f64]) -> f64 {
    p.iter()
        .zip(q)
        .filter(|(&pl, _)| pl > 0.0)
        .map(|(&pl, &ql)| pl * (pl.ln() - ql.max(KL_EPS).ln()))
        .sum::<f64>()
        .max(0.0)
}

/// KL from a fixed target `p` to `softmax(z)`, evaluated with log-softmax so
/// saturated logits stay finite.
pub fn kl_to_logits(p: &[f64], z: &[f64]) -> f64 {
    let log_q = log_softmax(z);
    p.iter()
        .zip(&log_q)
        .filter(|(&pl, _)| pl > 0.0)
        .map(|(&pl, &lq)| pl * (pl.ln() - lq.max(KL_EPS.ln())))
        .sum()
}

/// Gradient of `KL(p ‖ softmax(z))` with respect to `z` for constant `p`.
pub fn kl_grad_logits(p: &[f64], z: &[f64]) -> Vec<f64> {
    let mut g = softmax(z);
    g.iter_mut().zip(p).for_each(|(gi, &pi)| *gi -= pi);
    g
}

/// `softmax(−log π)`, in the closed form `π_l⁻¹ / Σ_k π_k⁻¹`.
pub fn alpha_weights(prior: &ClassPrior) -> Vec<f64> {
    let inv: Vec<f64> = prior.probs().iter().map(|p| 1.0 / p).collect();
    let s: f64 = inv.iter().sum();
    inv.into_iter().map(|v| v / s).collect()
}

/// The pseudo-label dependent scale `τ(ŷ) = A·α_ŷ + B`.
#[derive(Debug, Clone, PartialEq)]
pub struct AdjustmentSchedule {
    a: f64,
    b: f64,
    alpha: Vec<f64>,
}

impl AdjustmentSchedule {
    pub fn new(a: f64, b: f64, prior: &ClassPrior) -> Result<Self> {
        if !(a >= 0.0) || !(b >= 0.0) || !a.is_finite() || !b.is_finite() {
            return Err(TrasError::InvalidArgument(format!(
                "A and B must be finite and >= 0, got A={a}, B={b}"
            )));
        }
        Ok(Self {
            a,
            b,
            alpha: alpha_weights(prior),
        })
    }

    pub fn a(&self) -> f64 {
        self.a
    }

    pub fn b(&self) -> f64 {
        self.b
    }

    pub fn alpha(&self) -> &[f64] {
        &self.alpha
    }

    pub fn tau_of(&self, pseudo_label: usize) -> f64 {
        self.a * self.alpha[pseudo_label] + self.b
    }
}

/// Free-function form of [`AdjustmentSchedule::tau_of`].
pub fn tau_of(pseudo_label: usize, sched: &AdjustmentSchedule) -> f64 {
    sched.tau_of(pseudo_label)
}

/// `softmax(z_T − τ(ŷ)·log π)`: flattens a head-biased teacher distribution,
/// more aggressively when the pseudo-label is a rare class.
pub fn transform_teacher_logits(
    z_t: &[f64],
    pseudo_label: usize,
    prior: &ClassPrior,
    sched: &AdjustmentSchedule,
) -> Vec<f64> {
    softmax(&shift_by_log_prior(z_t, prior, -sched.tau_of(pseudo_label)))
}
