use super::{rows_cols, LayerKind, LayerParams, ParamGrads, Real, Tensor};
use crate::error::{Error, Result};

fn check<T: Real>(input_shape: &[usize], params: &LayerParams<T>) -> Result<(usize, usize)> {
    if params.kind != LayerKind::Dense {
        return Err(Error::InvalidArgument(
            "fc layer needs dense parameters".into(),
        ));
    }
    let (n, f) = rows_cols(input_shape)?;
    if f != params.in_features() {
        return Err(Error::ShapeMismatch(format!(
            "input has {f} features, layer fan-in is {}",
            params.in_features()
        )));
    }
    Ok((n, f))
}

/// `y = W·x + b` for a vector, or row-wise for an `N×F` batch.
pub fn fc_forward<T: Real>(input: &Tensor<T>, params: &LayerParams<T>) -> Result<Tensor<T>> {
    let (n, f) = check(input.shape(), params)?;
    let m = params.out_features();
    let mut out = Vec::with_capacity(n * m);
    for _ in 0..n {
        out.extend_from_slice(params.biases.data());
    }
    T::gemm(
        n,
        f,
        m,
        T::one(),
        input.data(),
        (f as isize, 1),
        params.weights.data(),
        (1, f as isize),
        T::one(),
        &mut out,
        (m as isize, 1),
    );
    let shape = if input.rank() == 1 {
        vec![m]
    } else {
        vec![n, m]
    };
    Tensor::from_vec(&shape, out)
}

/// Backward pass of [`fc_forward`]; accumulates into `grads` and returns
/// `Wᵀ·grad_out`.
pub fn fc_backward<T: Real>(
    grad_out: &Tensor<T>,
    cached_input: &Tensor<T>,
    params: &LayerParams<T>,
    grads: &mut ParamGrads<T>,
) -> Result<Tensor<T>> {
    let (n, f) = check(cached_input.shape(), params)?;
    let m = params.out_features();
    let (gn, gm) = rows_cols(grad_out.shape())?;
    if gn != n || gm != m {
        return Err(Error::ShapeMismatch(format!(
            "gradient shape {:?} does not match layer output {n}×{m}",
            grad_out.shape()
        )));
    }
    // dW (m × f) += dYᵀ (m × n) · X (n × f)
    T::gemm(
        m,
        n,
        f,
        T::one(),
        grad_out.data(),
        (1, m as isize),
        cached_input.data(),
        (f as isize, 1),
        T::one(),
        grads.weights.data_mut(),
        (f as isize, 1),
    );
    let db = grads.biases.data_mut();
    for row in grad_out.data().chunks_exact(m) {
        for (b, &v) in db.iter_mut().zip(row) {
            *b += v;
        }
    }
    // dX (n × f) = dY (n × m) · W (m × f)
    let mut dx = Tensor::zeros(cached_input.shape());
    T::gemm(
        n,
        m,
        f,
        T::one(),
        grad_out.data(),
        (m as isize, 1),
        params.weights.data(),
        (f as isize, 1),
        T::zero(),
        dx.data_mut(),
        (f as isize, 1),
    );
    Ok(dx)
}
