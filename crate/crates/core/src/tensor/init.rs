use rand::Rng;

use super::{Real, Tensor};
use crate::error::{Error, Result};

/// Glorot/Xavier uniform initialization on `[-a, a]`,
/// `a = sqrt(6 / (fan_in + fan_out))`.
pub fn xavier_init<T: Real, R: Rng + ?Sized>(
    shape: &[usize],
    fan_in: usize,
    fan_out: usize,
    rng: &mut R,
) -> Result<Tensor<T>> {
    if fan_in == 0 || fan_out == 0 {
        return Err(Error::InvalidArgument(
            "fan-in and fan-out must be > 0".into(),
        ));
    }
    let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
    Ok(Tensor::from_fn(shape, |_| {
        T::from_f64_lossy(rng.random_range(-a..=a))
    }))
}
