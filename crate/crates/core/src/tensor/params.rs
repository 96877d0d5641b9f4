use super::{Real, Tensor};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum LayerKind {
    /// Weights `[out_channels, kernel, kernel, in_channels]`.
    Conv,
    /// Weights `[out_features, in_features]`.
    Dense,
}

/// A weight/bias pair. Used for gradients and for optimizer moments.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamGrads<T = f32> {
    pub weights: Tensor<T>,
    pub biases: Tensor<T>,
}

impl<T: Real> ParamGrads<T> {
    pub fn zeros_like(params: &LayerParams<T>) -> Self {
        Self {
            weights: Tensor::zeros(params.weights.shape()),
            biases: Tensor::zeros(params.biases.shape()),
        }
    }

    pub fn clear(&mut self) {
        self.weights.fill(T::zero());
        self.biases.fill(T::zero());
    }

    pub fn add_assign(&mut self, other: &ParamGrads<T>) -> Result<()> {
        self.weights.add_assign(&other.weights)?;
        self.biases.add_assign(&other.biases)
    }
}

/// Trainable parameters of one layer together with their gradient buffers
/// and Adam state.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerParams<T = f32> {
    pub kind: LayerKind,
    pub weights: Tensor<T>,
    pub biases: Tensor<T>,
    pub grad: ParamGrads<T>,
    pub adam_m: ParamGrads<T>,
    pub adam_v: ParamGrads<T>,
    pub step_count: u64,
    grads_fresh: bool,
}

impl<T: Real> LayerParams<T> {
    pub fn new(kind: LayerKind, weights: Tensor<T>, biases: Tensor<T>) -> Result<Self> {
        let out = match (kind, weights.shape()) {
            (LayerKind::Conv, [o, kh, kw, _]) if kh == kw => *o,
            (LayerKind::Dense, [o, _]) => *o,
            (_, s) => {
                return Err(Error::ShapeMismatch(format!(
                    "{kind:?} weights cannot have shape {s:?}"
                )))
            }
        };
        biases.expect_shape(&[out])?;
        let zeros = ParamGrads {
            weights: Tensor::zeros(weights.shape()),
            biases: Tensor::zeros(biases.shape()),
        };
        Ok(Self {
            kind,
            weights,
            biases,
            grad: zeros.clone(),
            adam_m: zeros.clone(),
            adam_v: zeros,
            step_count: 0,
            grads_fresh: false,
        })
    }

    pub fn conv(weights: Tensor<T>, biases: Tensor<T>) -> Result<Self> {
        Self::new(LayerKind::Conv, weights, biases)
    }

    pub fn dense(weights: Tensor<T>, biases: Tensor<T>) -> Result<Self> {
        Self::new(LayerKind::Dense, weights, biases)
    }

    pub fn out_features(&self) -> usize {
        self.weights.shape()[0]
    }

    /// Input channels for conv layers, fan-in for dense layers.
    pub fn in_features(&self) -> usize {
        *self.weights.shape().last().expect("weights have rank ≥ 2")
    }

    pub fn kernel_size(&self) -> Option<usize> {
        match self.kind {
            LayerKind::Conv => Some(self.weights.shape()[1]),
            LayerKind::Dense => None,
        }
    }

    pub fn param_count(&self) -> usize {
        self.weights.len() + self.biases.len()
    }

    /// Adds a gradient contribution and marks the gradients as ready for
    /// the next optimizer step.
    pub fn accumulate(&mut self, grads: &ParamGrads<T>) -> Result<()> {
        self.grad.add_assign(grads)?;
        self.grads_fresh = true;
        Ok(())
    }

    pub fn mark_grads_fresh(&mut self) {
        self.grads_fresh = true;
    }

    pub fn grads_fresh(&self) -> bool {
        self.grads_fresh
    }

    pub fn zero_grads(&mut self) {
        self.grad.clear();
        self.grads_fresh = false;
    }

    pub fn cast<U: Real>(&self) -> LayerParams<U> {
        let cast_pair = |p: &ParamGrads<T>| ParamGrads {
            weights: p.weights.cast(),
            biases: p.biases.cast(),
        };
        LayerParams {
            kind: self.kind,
            weights: self.weights.cast(),
            biases: self.biases.cast(),
            grad: cast_pair(&self.grad),
            adam_m: cast_pair(&self.adam_m),
            adam_v: cast_pair(&self.adam_v),
            step_count: self.step_count,
            grads_fresh: self.grads_fresh,
        }
    }
}
