//! Dense tensors and reverse-mode differentiation.

mod gradcheck;
mod graph;
mod tensor;

pub use gradcheck::{grad_check, grad_check_many};
pub use graph::{sigmoid, Activation, BnMode, BnStats, Graph, Var, BN_EPS, BN_MOMENTUM};
pub use tensor::Tensor;

use crate::error::{Error, Result};

/// `softmax(scores / tau)`, shifted by the max for stability.
pub fn softmax_temperature(scores: &[f64], tau: f64) -> Result<Vec<f64>> {
    if !(tau > 0.0) || !tau.is_finite() {
        return Err(Error::Parameter(format!(
            "temperature must be a positive finite number, got {tau}"
        )));
    }
    if scores.is_empty() {
        return Ok(vec![]);
    }
    let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = scores.iter().map(|s| ((s - max) / tau).exp()).collect();
    let total: f64 = exps.iter().sum();
    Ok(exps.into_iter().map(|e| e / total).collect())
}
