use super::{LayerParams, Real, Tensor};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.001,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

fn update<T: Real>(
    param: &mut Tensor<T>,
    grad: &Tensor<T>,
    m: &mut Tensor<T>,
    v: &mut Tensor<T>,
    cfg: &AdamConfig,
    t: u64,
) {
    let b1 = T::from_f64_lossy(cfg.beta1);
    let b2 = T::from_f64_lossy(cfg.beta2);
    let one = T::one();
    // bias corrections folded into the step size
    let c1 = 1.0 - cfg.beta1.powf(t as f64);
    let c2 = 1.0 - cfg.beta2.powf(t as f64);
    let inv_c1 = T::from_f64_lossy(1.0 / c1);
    let inv_c2 = T::from_f64_lossy(1.0 / c2);
    let lr = T::from_f64_lossy(cfg.learning_rate);
    let eps = T::from_f64_lossy(cfg.eps);
    for (((w, &g), m), v) in param
        .data_mut()
        .iter_mut()
        .zip(grad.data())
        .zip(m.data_mut())
        .zip(v.data_mut())
    {
        *m = b1 * *m + (one - b1) * g;
        *v = b2 * *v + (one - b2) * g * g;
        let m_hat = *m * inv_c1;
        let v_hat = *v * inv_c2;
        *w -= lr * m_hat / (v_hat.sqrt() + eps);
    }
}

/// One bias-corrected Adam update of weights and biases. Consumes the
/// accumulated gradients (they are zeroed afterwards).
pub fn adam_step<T: Real>(params: &mut LayerParams<T>, cfg: &AdamConfig) -> Result<()> {
    if !params.grads_fresh() {
        return Err(Error::StaleGradients);
    }
    let t = params.step_count + 1;
    update(
        &mut params.weights,
        &params.grad.weights,
        &mut params.adam_m.weights,
        &mut params.adam_v.weights,
        cfg,
        t,
    );
    update(
        &mut params.biases,
        &params.grad.biases,
        &mut params.adam_m.biases,
        &mut params.adam_v.biases,
        cfg,
        t,
    );
    params.step_count = t;
    params.zero_grads();
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar(w: f64) -> LayerParams<f64> {
        LayerParams::dense(
            Tensor::from_vec(&[1, 1], vec![w]).unwrap(),
            Tensor::zeros(&[1]),
        )
        .unwrap()
    }

    #[test]
    fn zero_gradient_is_noop() {
        let mut p = scalar(0.75);
        p.mark_grads_fresh();
        adam_step(&mut p, &AdamConfig::default()).unwrap();
        assert_eq!(p.weights.data()[0], 0.75);
        assert_eq!(p.step_count, 1);
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        let mut p = scalar(0.0);
        p.grad.weights.data_mut()[0] = 1.0;
        p.mark_grads_fresh();
        adam_step(&mut p, &AdamConfig::default()).unwrap();
        let dw = p.weights.data()[0];
        assert!((dw + 0.001).abs() < 1e-10, "{dw}");
        assert_eq!(p.grad.weights.data()[0], 0.0);
    }

    #[test]
    fn stale_gradients_are_rejected() {
        let mut p = scalar(1.0);
        p.mark_grads_fresh();
        adam_step(&mut p, &AdamConfig::default()).unwrap();
        assert!(matches!(
            adam_step(&mut p, &AdamConfig::default()),
            Err(Error::StaleGradients)
        ));
        assert_eq!(p.step_count, 1);
    }

    #[test]
    fn minimizes_square() {
        // f(w) = w², f' = 2w
        let cfg = AdamConfig::default();
        let mut p = scalar(1.0);
        let mut prev = 1.0f64;
        for step in 0..100 {
            let w = p.weights.data()[0];
            p.grad.weights.data_mut()[0] = 2.0 * w;
            p.mark_grads_fresh();
            adam_step(&mut p, &cfg).unwrap();
            let now = p.weights.data()[0].abs();
            if step >= 1 {
                assert!(now < prev, "step {step}: {now} ≥ {prev}");
            }
            prev = now;
        }
        assert!(prev < 0.95, "{prev}");
    }
}
