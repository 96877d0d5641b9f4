use super::{nhwc, shape_like, Real, Tensor};
use crate::error::{Error, Result};

/// Output extent of max pooling along one axis. Trailing rows/columns that
/// do not fill a whole window are dropped (floor semantics).
pub fn pool_output_dim(dim: usize, window: usize, stride: usize) -> Result<usize> {
    if window == 0 || stride == 0 {
        return Err(Error::InvalidArgument(
            "window and stride must be ≥ 1".into(),
        ));
    }
    if dim < window {
        return Err(Error::ShapeMismatch(format!(
            "input extent {dim} is smaller than pooling window {window}"
        )));
    }
    Ok((dim - window) / stride + 1)
}

/// Flat input index of the winning element for every output element.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PoolIndices {
    input_shape: Vec<usize>,
    output_shape: Vec<usize>,
    argmax: Vec<u32>,
}

impl PoolIndices {
    pub fn argmax(&self) -> &[u32] {
        &self.argmax
    }
}

/// Max pooling. Ties go to the first element in row-major window order.
pub fn maxpool_forward<T: Real>(
    input: &Tensor<T>,
    window: usize,
    stride: usize,
) -> Result<(Tensor<T>, PoolIndices)> {
    let (n, h, w, c) = nhwc(input.shape())?;
    let oh = pool_output_dim(h, window, stride)?;
    let ow = pool_output_dim(w, window, stride)?;
    let x = input.data();
    let mut out = Vec::with_capacity(n * oh * ow * c);
    let mut argmax = Vec::with_capacity(n * oh * ow * c);
    for b in 0..n {
        let base = b * h * w * c;
        for oy in 0..oh {
            for ox in 0..ow {
                for ch in 0..c {
                    let mut best_idx = base + ((oy * stride) * w + ox * stride) * c + ch;
                    let mut best = x[best_idx];
                    for ky in 0..window {
                        for kx in 0..window {
                            let idx = base + ((oy * stride + ky) * w + ox * stride + kx) * c + ch;
                            // strict comparison keeps the first maximum
                            if x[idx] > best {
                                best = x[idx];
                                best_idx = idx;
                            }
                        }
                    }
                    out.push(best);
                    argmax.push(best_idx as u32);
                }
            }
        }
    }
    let output_shape = shape_like(input.shape(), n, oh, ow, c);
    let indices = PoolIndices {
        input_shape: input.shape().to_vec(),
        output_shape: output_shape.clone(),
        argmax,
    };
    Ok((Tensor::from_vec(&output_shape, out)?, indices))
}

/// Routes each output gradient to the input position that won the max.
pub fn maxpool_backward<T: Real>(grad_out: &Tensor<T>, indices: &PoolIndices) -> Result<Tensor<T>> {
    if grad_out.shape() != indices.output_shape.as_slice() {
        return Err(Error::ShapeMismatch(format!(
            "gradient shape {:?} does not match pooling output {:?}",
            grad_out.shape(),
            indices.output_shape
        )));
    }
    let mut dx = Tensor::zeros(&indices.input_shape);
    let d = dx.data_mut();
    for (&g, &i) in grad_out.data().iter().zip(&indices.argmax) {
        d[i as usize] += g;
    }
    Ok(dx)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn max_of_four() {
        let x = Tensor::from_vec(&[2, 2, 1], vec![1.0f32, 2.0, 3.0, 4.0]).unwrap();
        let (y, idx) = maxpool_forward(&x, 2, 2).unwrap();
        assert_eq!(y.data(), &[4.0]);
        let dx = maxpool_backward(&Tensor::from_vec(&[1, 1, 1], vec![1.0]).unwrap(), &idx).unwrap();
        assert_eq!(dx.data(), &[0.0, 0.0, 0.0, 1.0]);
    }

    #[test]
    fn ties_go_to_first_row_major_element() {
        let x = Tensor::from_vec(&[2, 2, 1], vec![5.0f32, 5.0, 5.0, 5.0]).unwrap();
        let (_, idx) = maxpool_forward(&x, 2, 2).unwrap();
        assert_eq!(idx.argmax(), &[0]);
        let dx = maxpool_backward(&Tensor::filled(&[1, 1, 1], 2.0), &idx).unwrap();
        assert_eq!(dx.data(), &[2.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn odd_extents_floor() {
        let x = Tensor::<f32>::zeros(&[27, 27, 16]);
        let (y, _) = maxpool_forward(&x, 2, 2).unwrap();
        assert_eq!(y.shape(), &[13, 13, 16]);
        let x = Tensor::<f32>::zeros(&[13, 13, 32]);
        let (y, _) = maxpool_forward(&x, 2, 2).unwrap();
        assert_eq!(y.shape(), &[6, 6, 32]);
    }

    #[test]
    fn too_small_input_is_rejected() {
        let x = Tensor::<f32>::zeros(&[1, 5, 2]);
        assert!(maxpool_forward(&x, 2, 2).is_err());
    }

    #[test]
    fn stale_indices_are_rejected() {
        let x = Tensor::<f32>::zeros(&[4, 4, 1]);
        let (_, idx) = maxpool_forward(&x, 2, 2).unwrap();
        assert!(maxpool_backward(&Tensor::<f32>::zeros(&[1, 1, 1]), &idx).is_err());
    }
}
