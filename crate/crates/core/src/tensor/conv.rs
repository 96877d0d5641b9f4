use super::{nhwc, shape_like, LayerKind, LayerParams, ParamGrads, Real, Tensor};
use crate::error::{Error, Result};

/// Output extent of a convolution along one axis.
pub fn conv_output_dim(dim: usize, kernel: usize, stride: usize, pad: usize) -> Result<usize> {
    if stride == 0 {
        return Err(Error::InvalidArgument("stride must be ≥ 1".into()));
    }
    if dim + 2 * pad < kernel {
        return Err(Error::ShapeMismatch(format!(
            "input extent {dim} with padding {pad} is smaller than kernel {kernel}"
        )));
    }
    Ok((dim + 2 * pad - kernel) / stride + 1)
}

/// State kept from a convolution forward pass for the backward pass.
#[derive(Clone, Debug)]
pub struct ConvCache<T = f32> {
    input_shape: Vec<usize>,
    output_shape: Vec<usize>,
    /// im2col matrix, `(N·OH·OW) × (k·k·C)`.
    cols: Vec<T>,
    stride: usize,
    pad: usize,
}

struct Geometry {
    n: usize,
    h: usize,
    w: usize,
    c: usize,
    k: usize,
    oh: usize,
    ow: usize,
    stride: usize,
    pad: usize,
}

impl Geometry {
    fn patch_len(&self) -> usize {
        self.k * self.k * self.c
    }

    fn rows(&self) -> usize {
        self.n * self.oh * self.ow
    }
}

fn im2col<T: Real>(input: &[T], g: &Geometry, cols: &mut [T]) {
    let kk = g.patch_len();
    let mut row = 0;
    for n in 0..g.n {
        let image = &input[n * g.h * g.w * g.c..(n + 1) * g.h * g.w * g.c];
        for oy in 0..g.oh {
            for ox in 0..g.ow {
                let dst = &mut cols[row * kk..(row + 1) * kk];
                for ky in 0..g.k {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    for kx in 0..g.k {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        let off = (ky * g.k + kx) * g.c;
                        let cell = &mut dst[off..off + g.c];
                        if iy < 0 || ix < 0 || iy >= g.h as isize || ix >= g.w as isize {
                            cell.fill(T::zero());
                        } else {
                            let src = (iy as usize * g.w + ix as usize) * g.c;
                            cell.copy_from_slice(&image[src..src + g.c]);
                        }
                    }
                }
                row += 1;
            }
        }
    }
}

fn col2im<T: Real>(cols: &[T], g: &Geometry, out: &mut [T]) {
    let kk = g.patch_len();
    let mut row = 0;
    for n in 0..g.n {
        let image = &mut out[n * g.h * g.w * g.c..(n + 1) * g.h * g.w * g.c];
        for oy in 0..g.oh {
            for ox in 0..g.ow {
                let src = &cols[row * kk..(row + 1) * kk];
                for ky in 0..g.k {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    for kx in 0..g.k {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix < 0 || ix >= g.w as isize {
                            continue;
                        }
                        let off = (ky * g.k + kx) * g.c;
                        let dst = (iy as usize * g.w + ix as usize) * g.c;
                        for (d, &s) in image[dst..dst + g.c].iter_mut().zip(&src[off..off + g.c]) {
                            *d += s;
                        }
                    }
                }
                row += 1;
            }
        }
    }
}

fn geometry<T: Real>(
    input_shape: &[usize],
    params: &LayerParams<T>,
    stride: usize,
    pad: usize,
) -> Result<Geometry> {
    if params.kind != LayerKind::Conv {
        return Err(Error::InvalidArgument(
            "conv2d needs conv parameters".into(),
        ));
    }
    let (n, h, w, c) = nhwc(input_shape)?;
    let k = params.kernel_size().expect("conv layer");
    if params.in_features() != c {
        return Err(Error::ShapeMismatch(format!(
            "input has {c} channels, kernels expect {}",
            params.in_features()
        )));
    }
    Ok(Geometry {
        n,
        h,
        w,
        c,
        k,
        oh: conv_output_dim(h, k, stride, pad)?,
        ow: conv_output_dim(w, k, stride, pad)?,
        stride,
        pad,
    })
}

/// Zero-padded 2-D convolution (cross-correlation) over an `H×W×C` or
/// `N×H×W×C` input.
pub fn conv2d_forward<T: Real>(
    input: &Tensor<T>,
    params: &LayerParams<T>,
    stride: usize,
    pad: usize,
) -> Result<(Tensor<T>, ConvCache<T>)> {
    let g = geometry(input.shape(), params, stride, pad)?;
    let out_c = params.out_features();
    let kk = g.patch_len();
    let rows = g.rows();

    let mut cols = vec![T::zero(); rows * kk];
    im2col(input.data(), &g, &mut cols);

    let mut out = Vec::with_capacity(rows * out_c);
    for _ in 0..rows {
        out.extend_from_slice(params.biases.data());
    }
    // out (rows × out_c) += cols (rows × kk) · Wᵀ, W stored out_c × kk
    T::gemm(
        rows,
        kk,
        out_c,
        T::one(),
        &cols,
        (kk as isize, 1),
        params.weights.data(),
        (1, kk as isize),
        T::one(),
        &mut out,
        (out_c as isize, 1),
    );

    let output_shape = shape_like(input.shape(), g.n, g.oh, g.ow, out_c);
    let cache = ConvCache {
        input_shape: input.shape().to_vec(),
        output_shape: output_shape.clone(),
        cols,
        stride,
        pad,
    };
    Ok((Tensor::from_vec(&output_shape, out)?, cache))
}

/// Backward pass of [`conv2d_forward`].
///
/// Weight and bias gradients are accumulated into `grads`. The input
/// gradient is returned unless `need_input_grad` is false (first layer).
pub fn conv2d_backward<T: Real>(
    grad_out: &Tensor<T>,
    cache: &ConvCache<T>,
    params: &LayerParams<T>,
    grads: &mut ParamGrads<T>,
    need_input_grad: bool,
) -> Result<Option<Tensor<T>>> {
    grad_out.expect_shape(&cache.output_shape)?;
    let g = geometry(&cache.input_shape, params, cache.stride, cache.pad)?;
    grads.weights.expect_shape(params.weights.shape())?;
    let out_c = params.out_features();
    let kk = g.patch_len();
    let rows = g.rows();
    let dy = grad_out.data();

    // dW (out_c × kk) += dYᵀ (out_c × rows) · cols (rows × kk)
    T::gemm(
        out_c,
        rows,
        kk,
        T::one(),
        dy,
        (1, out_c as isize),
        &cache.cols,
        (kk as isize, 1),
        T::one(),
        grads.weights.data_mut(),
        (kk as isize, 1),
    );
    let db = grads.biases.data_mut();
    for row in dy.chunks_exact(out_c) {
        for (b, &v) in db.iter_mut().zip(row) {
            *b += v;
        }
    }

    if !need_input_grad {
        return Ok(None);
    }
    // dCols (rows × kk) = dY (rows × out_c) · W (out_c × kk)
    let mut dcols = vec![T::zero(); rows * kk];
    T::gemm(
        rows,
        out_c,
        kk,
        T::one(),
        dy,
        (out_c as isize, 1),
        params.weights.data(),
        (kk as isize, 1),
        T::zero(),
        &mut dcols,
        (kk as isize, 1),
    );
    let mut dx = Tensor::zeros(&cache.input_shape);
    col2im(&dcols, &g, dx.data_mut());
    Ok(Some(dx))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn conv_params(weights: Vec<f64>, shape: [usize; 4], bias: Vec<f64>) -> LayerParams<f64> {
        LayerParams::conv(
            Tensor::from_vec(&shape, weights).unwrap(),
            Tensor::from_vec(&[shape[0]], bias).unwrap(),
        )
        .unwrap()
    }

    #[test]
    fn identity_kernel_reproduces_input() {
        let mut w = vec![0.0; 9];
        w[4] = 1.0;
        let params = conv_params(w, [1, 3, 3, 1], vec![0.0]);
        let x = Tensor::from_fn(&[5, 5, 1], |i| i as f64 * 0.5 - 3.0);
        let (y, _) = conv2d_forward(&x, &params, 1, 1).unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn channel_mismatch_is_rejected() {
        let params = conv_params(vec![0.0; 18], [1, 3, 3, 2], vec![0.0]);
        let x = Tensor::<f64>::zeros(&[4, 4, 3]);
        assert!(matches!(
            conv2d_forward(&x, &params, 1, 1),
            Err(Error::ShapeMismatch(_))
        ));
    }

    #[test]
    fn zero_grad_out_gives_zero_grads() {
        let params = conv_params(
            (0..18).map(|i| i as f64).collect(),
            [2, 3, 3, 1],
            vec![1.0, 2.0],
        );
        let x = Tensor::from_fn(&[4, 4, 1], |i| i as f64);
        let (y, cache) = conv2d_forward(&x, &params, 1, 1).unwrap();
        let mut grads = ParamGrads::zeros_like(&params);
        let dx = conv2d_backward(&Tensor::zeros(y.shape()), &cache, &params, &mut grads, true)
            .unwrap()
            .unwrap();
        assert!(dx.data().iter().all(|&v| v == 0.0));
        assert!(grads.weights.data().iter().all(|&v| v == 0.0));
        assert!(grads.biases.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn single_pixel_input_gradient_is_weighted_grad_out() {
        // 1×1×2 input, 3 kernels: only the centre tap touches the pixel, so
        // dx[c] = Σ_o W[o, 1, 1, c] · dy[o].
        let weights: Vec<f64> = (0..54).map(|i| (i as f64 - 20.0) * 0.1).collect();
        let params = conv_params(weights.clone(), [3, 3, 3, 2], vec![0.0; 3]);
        let x = Tensor::from_vec(&[1, 1, 2], vec![0.3, -0.7]).unwrap();
        let (y, cache) = conv2d_forward(&x, &params, 1, 1).unwrap();
        assert_eq!(y.shape(), &[1, 1, 3]);
        let dy = Tensor::from_vec(&[1, 1, 3], vec![1.0, -2.0, 0.5]).unwrap();
        let mut grads = ParamGrads::zeros_like(&params);
        let dx = conv2d_backward(&dy, &cache, &params, &mut grads, true)
            .unwrap()
            .unwrap();
        let centre = |o: usize, c: usize| weights[o * 18 + 4 * 2 + c];
        for c in 0..2 {
            let expected: f64 = (0..3).map(|o| centre(o, c) * dy.data()[o]).sum();
            assert!((dx.data()[c] - expected).abs() < 1e-12);
        }
    }

    #[test]
    fn strided_output_extent() {
        assert_eq!(conv_output_dim(27, 3, 1, 1).unwrap(), 27);
        assert_eq!(conv_output_dim(8, 3, 2, 1).unwrap(), 4);
        assert!(conv_output_dim(1, 3, 1, 0).is_err());
    }
}
