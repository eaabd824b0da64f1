//! Adam with bias correction, and exponential moving average of weights.

use serde::{Deserialize, Serialize};

use crate::error::{Result, TrasError};
use crate::model::{GradientSet, ModelParams};

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// First/second moment buffers mirroring the parameters, plus the step count.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub first_moment: ModelParams,
    pub second_moment: ModelParams,
    pub step: u64,
}

impl AdamState {
    pub fn new(params: &ModelParams) -> Self {
        Self {
            first_moment: params.zeros_like(),
            second_moment: params.zeros_like(),
            step: 0,
        }
    }
}

fn check_shapes(a: &ModelParams, b: &ModelParams) -> Result<()> {
    let (ta, tb) = (a.tensors(), b.tensors());
    if ta.len() != tb.len() {
        return Err(TrasError::ShapeMismatch {
            expected: ta.len(),
            actual: tb.len(),
        });
    }
    for (x, y) in ta.iter().zip(&tb) {
        if x.len() != y.len() {
            return Err(TrasError::ShapeMismatch {
                expected: x.len(),
                actual: y.len(),
            });
        }
    }
    Ok(())
}

/// One Adam update in place.
pub fn adam_step(params: &mut ModelParams, grads: &GradientSet, state: &mut AdamState, lr: f64) -> Result<()> {
    check_shapes(params, grads)?;
    check_shapes(params, &state.first_moment)?;
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - ADAM_BETA1.powi(t);
    let c2 = 1.0 - ADAM_BETA2.powi(t);
    let grads = grads.tensors();
    let params = params.tensors_mut();
    let m = state.first_moment.tensors_mut();
    let v = state.second_moment.tensors_mut();
    for (((p, g), m), v) in params.into_iter().zip(grads).zip(m).zip(v) {
        for i in 0..p.len() {
            let gi = g[i];
            m[i] = ADAM_BETA1 * m[i] + (1.0 - ADAM_BETA1) * gi;
            v[i] = ADAM_BETA2 * v[i] + (1.0 - ADAM_BETA2) * gi * gi;
            let m_hat = m[i] / c1;
            let v_hat = v[i] / c2;
            p[i] -= lr * m_hat / (v_hat.sqrt() + ADAM_EPS);
        }
    }
    Ok(())
}

/// `ema ← decay·ema + (1−decay)·params`, elementwise.
pub fn ema_update(ema: &mut ModelParams, params: &ModelParams, decay: f64) -> Result<()> {
    check_shapes(ema, params)?;
    for (e, p) in ema.tensors_mut().into_iter().zip(params.tensors()) {
        e.iter_mut().zip(p).for_each(|(e, &p)| *e = decay * *e + (1.0 - decay) * p);
    }
    Ok(())
}
