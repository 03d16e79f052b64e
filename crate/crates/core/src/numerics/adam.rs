use serde::{Deserialize, Serialize};

use super::tensor::RealTensor;
use super::NumericsError;

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// Per-tensor moment accumulators plus the shared step counter.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub m: Vec<RealTensor>,
    pub v: Vec<RealTensor>,
    pub t: u64,
}

impl AdamState {
    /// Zero state matching the shapes of `params`.
    pub fn new(params: &[RealTensor]) -> Self {
        let zeros: Vec<RealTensor> = params.iter().map(|p| RealTensor::zeros(p.shape().to_vec())).collect();
        Self {
            m: zeros.clone(),
            v: zeros,
            t: 0,
        }
    }
}

/// One bias-corrected Adam update applied in place.
pub fn adam_step(
    params: &mut [RealTensor],
    grads: &[RealTensor],
    state: &mut AdamState,
    lr: f64,
) -> Result<(), NumericsError> {
    if params.len() != grads.len() || params.len() != state.m.len() || params.len() != state.v.len() {
        return Err(NumericsError::ShapeMismatch {
            op: "adam_step",
            lhs: vec![params.len()],
            rhs: vec![grads.len(), state.m.len()],
        });
    }
    for (i, p) in params.iter().enumerate() {
        for other in [&grads[i], &state.m[i], &state.v[i]] {
            if other.shape() != p.shape() {
                return Err(NumericsError::ShapeMismatch {
                    op: "adam_step",
                    lhs: p.shape().to_vec(),
                    rhs: other.shape().to_vec(),
                });
            }
        }
    }
    state.t += 1;
    let t = state.t as i32;
    let c1 = 1.0 - ADAM_BETA1.powi(t);
    let c2 = 1.0 - ADAM_BETA2.powi(t);
    for (i, p) in params.iter_mut().enumerate() {
        let g = grads[i].data();
        let m = state.m[i].data_mut();
        for (mj, gj) in m.iter_mut().zip(g) {
            *mj = ADAM_BETA1 * *mj + (1.0 - ADAM_BETA1) * gj;
        }
        let v = state.v[i].data_mut();
        for (vj, gj) in v.iter_mut().zip(g) {
            *vj = ADAM_BETA2 * *vj + (1.0 - ADAM_BETA2) * gj * gj;
        }
        let (m, v) = (state.m[i].data(), state.v[i].data());
        for ((pj, mj), vj) in p.data_mut().iter_mut().zip(m).zip(v) {
            let mhat = mj / c1;
            let vhat = vj / c2;
            *pj -= lr * mhat / (vhat.sqrt() + ADAM_EPS);
        }
    }
    Ok(())
}
