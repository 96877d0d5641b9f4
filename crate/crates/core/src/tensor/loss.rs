use super::{LayerParams, Real, Tensor};
use crate::error::{Error, Result};

/// Predictions are clamped to `[PROB_CLAMP, 1 - PROB_CLAMP]` before `ln`.
pub const PROB_CLAMP: f64 = 1e-7;

/// Decomposition of the regularized objective `L' = L + β·½ΣW²`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossReport {
    /// Cross-entropy `L`.
    pub cross_entropy: f64,
    /// `½ΣW²` over conv and dense weights (biases excluded).
    pub penalty: f64,
    /// `L'`.
    pub total: f64,
    pub beta: f64,
}

impl LossReport {
    pub fn new(cross_entropy: f64, penalty: f64, beta: f64) -> Self {
        Self {
            cross_entropy,
            penalty,
            total: cross_entropy + beta * penalty,
            beta,
        }
    }
}

/// Multi-label binary cross-entropy summed over every element.
///
/// Returns the loss and its gradient with respect to the predictions.
pub fn cross_entropy_loss<T: Real>(
    predictions: &Tensor<T>,
    labels: &Tensor<T>,
) -> Result<(T, Tensor<T>)> {
    labels.expect_shape(predictions.shape())?;
    let lo = T::from_f64_lossy(PROB_CLAMP);
    let hi = T::one() - lo;
    let mut loss = T::zero();
    let mut grad = Vec::with_capacity(predictions.len());
    for (&p, &y) in predictions.data().iter().zip(labels.data()) {
        if y != T::zero() && y != T::one() {
            return Err(Error::InvalidArgument(format!("label {y:?} is not binary")));
        }
        let p = p.max(lo).min(hi);
        if y == T::one() {
            loss -= p.ln();
            grad.push(-T::one() / p);
        } else {
            loss -= (T::one() - p).ln();
            grad.push(T::one() / (T::one() - p));
        }
    }
    Ok((loss, Tensor::from_vec(predictions.shape(), grad)?))
}

/// Weight decay: adds `β·W` to each layer's weight gradient and returns
/// `β·½ΣW²`. Biases are not penalized.
pub fn l2_penalty<T: Real>(params: &mut [LayerParams<T>], beta: f64) -> Result<T> {
    if beta < 0.0 || !beta.is_finite() {
        return Err(Error::InvalidArgument(format!(
            "weight decay {beta} must be ≥ 0"
        )));
    }
    let b = T::from_f64_lossy(beta);
    let half = T::from_f64_lossy(0.5);
    let mut total = T::zero();
    for layer in params.iter_mut() {
        total += half * layer.weights.sum_squares();
        if beta > 0.0 {
            for (g, &w) in layer
                .grad
                .weights
                .data_mut()
                .iter_mut()
                .zip(layer.weights.data())
            {
                *g += b * w;
            }
        }
    }
    Ok(b * total)
}
