//! Scalar evaluations of the pre-training losses.

use crate::error::{Error, Result};
use crate::tensor::tape::{categorical_cross_entropy_value, restoration_value};
use crate::tensor::{Restoration, Scalar, Tensor};

pub const CE_EPS: f64 = 1e-12;

/// `-(1/B) Σ_b Σ_c Y_bc ln max(P_bc, 1e-12)` for one-hot `Y`.
pub fn categorical_cross_entropy<S: Scalar>(p: &Tensor<S>, y: &Tensor<S>) -> Result<f64> {
    categorical_cross_entropy_value(p, y, CE_EPS)
}

/// Batch mean of the per-sample Euclidean norm (or its square) of `x - x'`.
pub fn restoration_loss<S: Scalar>(x: &Tensor<S>, restored: &Tensor<S>, mode: Restoration) -> Result<f64> {
    Ok(restoration_value(x, restored, mode)?.0)
}

/// `λ_cls · L_cls + λ_rec · L_rec`; a zero weight drops its term entirely.
pub fn joint_loss(l_cls: f64, l_rec: f64, lambda_cls: f64, lambda_rec: f64) -> Result<f64> {
    if lambda_cls < 0.0 || lambda_rec < 0.0 {
        return Err(Error::usage(format!(
            "loss weights must be non-negative, got λ_cls={lambda_cls}, λ_rec={lambda_rec}"
        )));
    }
    let mut l = 0.0;
    if lambda_cls != 0.0 {
        l += lambda_cls * l_cls;
    }
    if lambda_rec != 0.0 {
        l += lambda_rec * l_rec;
    }
    Ok(l)
}
