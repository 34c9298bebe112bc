//! Learning-rate schedule, optimized-step selection and loss-curve records.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Matrix;

/// Denoising steps (1-based) that run an optimization update: every other
/// step among the first `first_n`, starting with step 1.
pub fn optimized_steps(first_n: usize, steps: usize) -> Vec<usize> {
    (1..=first_n.min(steps)).step_by(2).collect()
}

/// Learning rate at the `index`-th of `count` optimized steps: `lr0` at the
/// first, decaying linearly to 0 at the last.
pub fn learning_rate(lr0: f64, index: usize, count: usize) -> f64 {
    if count <= 1 {
        return lr0;
    }
    lr0 * (1.0 - index as f64 / (count - 1) as f64)
}

/// `param ← param − lr·grad`
pub fn gradient_descent(param: &mut Matrix, grad: &Matrix, lr: f64) -> Result<()> {
    if !param.same_shape(grad) {
        return Err(Error::shape("gradient does not match its parameter"));
    }
    param.axpy(-lr, grad);
    Ok(())
}

/// One point of a loss curve.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub step: usize,
    pub term: String,
    pub value: f64,
    pub w_remove: f64,
    pub lr: f64,
    /// Whether this evaluation drove a parameter update.
    #[serde(default)]
    pub optimized: bool,
    #[serde(default)]
    pub iteration: usize,
}
