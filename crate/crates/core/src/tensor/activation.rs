use rand::Rng;

use super::{Real, Tensor};
use crate::error::{Error, Result};

pub fn relu<T: Real>(x: &Tensor<T>) -> Tensor<T> {
    x.map(|v| if v > T::zero() { v } else { T::zero() })
}

/// Gradient of [`relu`] given the forward input. The subgradient at 0 is 0.
pub fn relu_backward<T: Real>(grad_out: &Tensor<T>, input: &Tensor<T>) -> Result<Tensor<T>> {
    grad_out.expect_shape(input.shape())?;
    let data = grad_out
        .data()
        .iter()
        .zip(input.data())
        .map(|(&g, &x)| if x > T::zero() { g } else { T::zero() })
        .collect();
    Tensor::from_vec(input.shape(), data)
}

/// Logistic function in the overflow-free split form.
pub fn sigmoid_scalar<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

pub fn sigmoid<T: Real>(x: &Tensor<T>) -> Tensor<T> {
    x.map(sigmoid_scalar)
}

/// Which units survived a dropout pass and the scale applied to survivors.
#[derive(Clone, Debug, PartialEq)]
pub struct DropoutMask<T = f32> {
    keep: Vec<bool>,
    scale: T,
}

impl<T: Real> DropoutMask<T> {
    pub fn identity(len: usize) -> Self {
        Self {
            keep: vec![true; len],
            scale: T::one(),
        }
    }

    pub fn keep(&self) -> &[bool] {
        &self.keep
    }

    pub fn scale(&self) -> T {
        self.scale
    }

    pub fn dropped(&self) -> usize {
        self.keep.iter().filter(|k| !**k).count()
    }

    /// Applies the same mask to a gradient.
    pub fn backward(&self, grad_out: &Tensor<T>) -> Result<Tensor<T>> {
        if grad_out.len() != self.keep.len() {
            return Err(Error::ShapeMismatch(format!(
                "dropout mask covers {} units, gradient has {}",
                self.keep.len(),
                grad_out.len()
            )));
        }
        let data = grad_out
            .data()
            .iter()
            .zip(&self.keep)
            .map(|(&g, &k)| if k { g * self.scale } else { T::zero() })
            .collect();
        Tensor::from_vec(grad_out.shape(), data)
    }
}

/// Inverted dropout: in training mode every unit is zeroed with probability
/// `p` and survivors are scaled by `1/(1-p)`; in inference mode it is the
/// identity.
pub fn dropout<T: Real, R: Rng + ?Sized>(
    x: &Tensor<T>,
    p: f64,
    rng: &mut R,
    training: bool,
) -> Result<(Tensor<T>, DropoutMask<T>)> {
    if !(0.0..1.0).contains(&p) {
        return Err(Error::InvalidArgument(format!(
            "dropout probability {p} outside [0, 1)"
        )));
    }
    if !training || p == 0.0 {
        return Ok((x.clone(), DropoutMask::identity(x.len())));
    }
    let scale = T::from_f64_lossy(1.0 / (1.0 - p));
    let keep: Vec<bool> = (0..x.len()).map(|_| rng.random::<f64>() >= p).collect();
    let data = x
        .data()
        .iter()
        .zip(&keep)
        .map(|(&v, &k)| if k { v * scale } else { T::zero() })
        .collect();
    Ok((
        Tensor::from_vec(x.shape(), data)?,
        DropoutMask { keep, scale },
    ))
}
